from molbuild.cli import main

raise SystemExit(main())
