"""Command line entry point: train, evaluate, rollout, baseline, summarize."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shlex
import shutil
import sys
from collections import defaultdict

import numpy as np

from molbuild import baselines
from molbuild.chem import State
from molbuild.config import RunConfig, build_run, read_config
from molbuild.energy import BACKEND_ENV_VAR, ExternalBackend, SurrogateBackend
from molbuild.env import PRESETS, SOLVATION, MolEnv, preset_bags
from molbuild.errors import ConfigError, MolBuildError, ParseError
from molbuild.nn.checkpoint import read_checkpoint
from molbuild.nn.schnet import SchNetConfig
from molbuild.policy import ActorCritic, PolicyConfig
from molbuild.ppo import evaluate_policy, train
from molbuild.xyz import write_xyz

log = logging.getLogger("molbuild")

EXIT_USAGE = 2


class CliError(Exception):
    """Startup problem reported to the user with exit status 2."""


# ---------------------------------------------------------------- shared option groups

def _add_task_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("task")
    g.add_argument("--config", help="INI file with [task], [ppo], [policy] and [run] sections")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named task preset")
    g.add_argument("--task", dest="kind", choices=["single_bag", "multi_bag", "solvation"])
    g.add_argument("--bag", action="append", help="chemical formula (repeatable)")
    g.add_argument("--solute", help="XYZ file (or packaged name) of the solvation solute")
    g.add_argument("--n-bags", type=int, help="solvation: number of bag refills")
    g.add_argument("--rho", type=float, help="solvation: distance penalty coefficient")
    g.add_argument("--backend", choices=["surrogate", "external"])
    g.add_argument("--backend-cmd", help=f"external engine command (default: ${BACKEND_ENV_VAR})")


def _sections(args) -> dict:
    sections = read_config(args.config) if getattr(args, "config", None) else {}
    task = sections.setdefault("task", {})
    for key, value in (("preset", args.preset), ("kind", args.kind), ("solute", args.solute),
                       ("n_bags", args.n_bags), ("rho", args.rho)):
        if value is not None:
            task[key] = str(value)
    if args.bag:
        task["bags"] = ",".join(args.bag)
    run = sections.setdefault("run", {})
    if args.backend:
        run["backend"] = args.backend
    if args.backend_cmd:
        run["backend_cmd"] = args.backend_cmd
    sections.setdefault("ppo", {})
    sections.setdefault("policy", {})
    return sections


def make_backend(kind: str, command: str | None):
    if kind == "surrogate":
        return SurrogateBackend()
    command = command or os.environ.get(BACKEND_ENV_VAR)
    if not command:
        raise CliError(f"--backend external needs --backend-cmd or ${BACKEND_ENV_VAR}")
    argv = shlex.split(command)
    if not argv or (shutil.which(argv[0]) is None and not os.access(argv[0], os.X_OK)):
        raise CliError(f"backend executable not found: {argv[0] if argv else command!r}")
    return ExternalBackend(argv)


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    sections = _sections(args)
    run = sections["run"]
    for key in ("seeds", "steps", "eval_every", "eval_episodes", "out", "checkpoints"):
        value = getattr(args, key)
        if value is not None:
            run[key] = str(value)
    if args.workers is not None:
        sections["ppo"]["workers"] = str(args.workers)
    if args.ablate_no_kappa:
        sections["policy"]["use_kappa"] = "false"
    cfg = build_run(sections)
    backend = make_backend(cfg.backend, cfg.backend_cmd)
    tag = "" if cfg.policy.use_kappa else "_no_kappa"
    try:
        for seed in cfg.seeds:
            out_dir = os.path.join(cfg.out, f"seed_{seed}")
            log.info("training seed %d -> %s", seed, out_dir)
            result = train(cfg.task, cfg.ppo, cfg.steps, cfg.eval_every, seed=seed, policy_config=cfg.policy,
                           backend=backend, out_dir=out_dir, metrics_name=f"metrics{tag}.csv",
                           checkpoints=cfg.checkpoints, eval_episodes=cfg.eval_episodes,
                           meta={"preset": sections["task"].get("preset")}, target_return=args.target_return)
            for formula, canvas in result.final_canvases.items():
                write_xyz(canvas, os.path.join(out_dir, f"final_{formula}{tag}.xyz"),
                          f"final structure {formula} seed={seed}")
            last = [r for r in result.rows if r["step"] == result.rows[-1]["step"]]
            for r in last:
                print(f"seed {seed} step {r['step']} bag {r['bag']} return {r['return']:.6f}")
    finally:
        backend.close()
    return 0


# ---------------------------------------------------------------- evaluate / rollout

def policy_from_checkpoint(path: str) -> tuple[ActorCritic, dict]:
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    params, meta = read_checkpoint(path)
    pol = dict(meta.get("policy", {}))
    schnet = SchNetConfig(**pol.pop("schnet")) if "schnet" in pol else SchNetConfig()
    policy = ActorCritic(PolicyConfig(schnet=schnet, **pol))
    policy.load_state_dict(params)
    return policy, meta


def _eval_setup(args):
    """Policy, task and backend for evaluate/rollout; the task defaults to the one trained on."""
    policy, meta = policy_from_checkpoint(args.checkpoint)
    sections = _sections(args)
    if not sections["task"]:
        if meta.get("preset"):
            sections["task"]["preset"] = meta["preset"]
        else:
            sections["task"]["kind"] = meta.get("task", "single_bag")
        sections["task"]["bags"] = ",".join(meta.get("bags", []))
    cfg: RunConfig = build_run(sections)
    return policy, cfg.task, make_backend(cfg.backend, cfg.backend_cmd)


def cmd_evaluate(args) -> int:
    policy, task, backend = _eval_setup(args)
    try:
        results = evaluate_policy(policy, task, backend, episodes=args.episodes,
                                  deterministic=not args.stochastic, seed=args.seed)
        for formula, (ret, _) in results.items():
            print(f"{formula}: mean return {ret:.6f} over {args.episodes} episode(s)")
        print(f"mean return {float(np.mean([r for r, _ in results.values()])):.6f}")
        if args.assess:
            canvases = [c for _, finals in results.values() for c in finals]
            scorer = backend if backend.supports_gradient else SurrogateBackend()
            table = baselines.assess_structures(canvases, scorer, allow_fragments=task.kind == SOLVATION)
            print(table.table(), end="")
    finally:
        backend.close()
    return 0


def cmd_rollout(args) -> int:
    policy, task, backend = _eval_setup(args)
    rng = np.random.default_rng(args.seed)
    bag = task.bags[0]
    env = MolEnv(task, backend, seed=rng)
    state = env.reset(State(task.initial_canvas, bag))
    if os.path.exists(args.out):
        os.remove(args.out)
    step, total = 0, 0.0
    try:
        while not env.done:
            sample = policy.act_one(state, None if not args.stochastic else rng, not args.stochastic)
            result = env.step(sample.to_action())
            step += 1
            total += result.reward
            state = result.next_state
            write_xyz(state.canvas, args.out, f"step={step} reward={result.reward:.8f} "
                      f"reason={result.info.get('reason')}", append=True)
    finally:
        backend.close()
    print(f"wrote {step} frames to {args.out}; return {total:.6f}")
    return 0


# ---------------------------------------------------------------- baseline

def cmd_baseline(args) -> int:
    sections = _sections(args)
    if args.bag and len(args.bag) > 1 and "kind" not in sections["task"] and not args.preset:
        sections["task"]["kind"] = "multi_bag"
    cfg = build_run(sections) if (args.preset or args.bag or args.config) else None
    if cfg is None:
        raise CliError("baseline needs --bag or --preset")
    backend = make_backend(cfg.backend, cfg.backend_cmd)
    if not backend.supports_gradient:
        raise CliError("baselines need position gradients; use the surrogate backend")
    os.makedirs(args.xyz_dir, exist_ok=True)
    results = []
    task = cfg.task
    if task.kind == SOLVATION:
        path = os.path.join(args.xyz_dir, f"solvation_n{task.n_bags}.xyz")
        results.append(baselines.optimal_return_solvation(task.initial_canvas, task.n_bags, task.rho, backend,
                                                          clusters=args.clusters, seed=args.seed, xyz_path=path))
    else:
        bags = task.bags if not args.preset or args.bag else preset_bags(args.preset)
        for bag in bags:
            path = os.path.join(args.xyz_dir, f"{bag.formula}.xyz")
            results.append(baselines.optimal_return_single(bag, backend, restarts=args.restarts, seed=args.seed,
                                                           xyz_path=path))
    baselines.write_baseline_file(args.out, results)
    for r in results:
        print(f"{r.bag}: optimal return {r.optimal_return:.6f}")
    return 0


# ---------------------------------------------------------------- summarize

def cmd_summarize(args) -> int:
    """Mean and 2-sigma band of evaluation returns across seeds, per step and bag."""
    files = []
    for root in args.runs:
        if os.path.isfile(root):
            files.append(root)
            continue
        for dirpath, _, names in sorted(os.walk(root)):
            files.extend(os.path.join(dirpath, n) for n in sorted(names)
                         if n.startswith("metrics") and n.endswith(".csv"))
    if not files:
        raise CliError("no metrics CSV files found")
    series = defaultdict(dict)  # (file, bag) -> {step: return}
    for path in files:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                series[(path, row["bag"])][int(row["step"])] = float(row["return"])
    table = defaultdict(list)  # (step, bag) -> returns across seeds
    for (_, bag), points in series.items():
        steps = sorted(points)
        values = [points[s] for s in steps]
        k = max(args.smooth, 1)
        for i, s in enumerate(steps):
            window = values[max(0, i - k + 1):i + 1]
            table[(s, bag)].append(float(np.mean(window)))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "bag", "n_seeds", "mean_return", "two_sigma"])
        for (step, bag) in sorted(table):
            vals = np.array(table[(step, bag)])
            two_sigma = 2.0 * float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            w.writerow([step, bag, len(vals), repr(float(vals.mean())), repr(two_sigma)])
    print(f"wrote {len(table)} rows to {args.out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molbuild", description="RL agents that build 3D molecules atom by atom")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train PPO agents, one per seed")
    _add_task_options(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--seeds", help="e.g. 0..9 or 0,3,7")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory (one subdirectory per seed)")
    p.add_argument("--checkpoints", choices=["all", "last", "none"])
    p.add_argument("--ablate-no-kappa", action="store_true", help="sample the signed dihedral directly")
    p.add_argument("--target-return", type=float, help="stop once every bag's evaluation return reaches this")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="deterministic evaluation of a checkpoint")
    _add_task_options(p)
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--stochastic", action="store_true", help="sample instead of taking the mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--assess", action="store_true", help="print validity, RMSD and diversity")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rollout", help="write the frames of one episode as multi-frame XYZ")
    _add_task_options(p)
    p.add_argument("checkpoint")
    p.add_argument("--out", default="rollout.xyz")
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("baseline", help="optimal returns by multi-start relaxation")
    _add_task_options(p)
    p.add_argument("--restarts", type=int, default=64)
    p.add_argument("--clusters", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="baselines.csv")
    p.add_argument("--xyz-dir", default="baseline_structures")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("summarize", help="aggregate metrics CSVs across seeds")
    p.add_argument("runs", nargs="+", help="run directories or metrics files")
    p.add_argument("--smooth", type=int, default=1, help="average over this many consecutive evaluations")
    p.add_argument("--out", default="summary.csv")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MolBuildError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
