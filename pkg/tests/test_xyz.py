import numpy as np
import pytest
from hypothesis import given, strategies as st

from molbuild.chem import Canvas
from molbuild.errors import ParseError
from molbuild.xyz import format_xyz, parse_xyz, read_xyz, read_xyz_frames, write_xyz

coords = st.floats(-50, 50, allow_nan=False)


@given(st.lists(st.tuples(st.sampled_from([1, 6, 7, 8, 9, 17]), coords, coords, coords), max_size=12))
def test_round_trip(atoms):
    canvas = Canvas([a[0] for a in atoms], [a[1:] for a in atoms] or None)
    back, comment = parse_xyz(format_xyz(canvas, "note"))
    assert comment == "note"
    assert back.numbers == canvas.numbers
    np.testing.assert_allclose(back.positions, canvas.positions, atol=1e-9, rtol=0)


def test_case_and_whitespace():
    canvas, _ = parse_xyz("2\n\n  o  0 0 0\nh\t0.96   0 0  extra\n")
    assert canvas.symbols == ["O", "H"]
    assert canvas.positions[1, 0] == 0.96


@pytest.mark.parametrize("text, line", [
    ("x\n\n", 1),
    ("2\n\nH 0 0 0\n", 4),
    ("1\n\nQq 0 0 0\n", 3),
    ("1\n\nH 0 zero 0\n", 3),
    ("1\n\nH 0 0\n", 3),
])
def test_errors_report_line(text, line):
    with pytest.raises(ParseError) as info:
        parse_xyz(text)
    assert info.value.line == line


def test_files(tmp_path):
    a = Canvas([8, 1], [[0, 0, 0], [0.96, 0, 0]])
    b = a.append(1, [0, 0.96, 0])
    path = tmp_path / "traj.xyz"
    write_xyz(a, path)
    write_xyz(b, path, append=True)
    frames = read_xyz_frames(path)
    assert [len(f) for f in frames] == [2, 3]
    assert read_xyz(path) == a
