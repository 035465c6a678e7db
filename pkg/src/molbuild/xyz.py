"""XYZ text format: count line, comment line, then ``SYMBOL x y z`` in Angstrom."""
from __future__ import annotations

import os
from typing import Iterable

from molbuild.chem import SYMBOLS, Canvas, atomic_number_of
from molbuild.errors import ParseError


def format_xyz(canvas: Canvas, comment: str = "") -> str:
    lines = [str(len(canvas)), comment.replace("\n", " ")]
    for z, (x, y, w) in zip(canvas.numbers, canvas.positions):
        lines.append(f"{SYMBOLS[z - 1]} {x:.15g} {y:.15g} {w:.15g}")
    return "\n".join(lines) + "\n"


def parse_xyz(text: str | Iterable[str], first_line: int = 1) -> tuple[Canvas, str]:
    """Parse one XYZ block. Symbols are case-insensitive, whitespace is free."""
    lines = text.splitlines() if isinstance(text, str) else list(text)
    if not lines:
        raise ParseError("empty XYZ block", line=first_line)
    try:
        n = int(lines[0].strip())
        if n < 0:
            raise ValueError
    except ValueError:
        raise ParseError(f"bad atom count {lines[0].strip()!r}", line=first_line) from None
    if len(lines) < n + 2:
        raise ParseError(f"expected {n} atom lines, found {max(len(lines) - 2, 0)}",
                         line=first_line + len(lines))
    comment = lines[1].rstrip("\n")
    numbers, positions = [], []
    for k in range(n):
        lineno = first_line + 2 + k
        fields = lines[2 + k].split()
        if len(fields) < 4:
            raise ParseError(f"expected 'SYMBOL x y z', got {lines[2 + k].strip()!r}", line=lineno)
        try:
            numbers.append(atomic_number_of(fields[0]))
        except ParseError as exc:
            raise ParseError(str(exc), line=lineno) from None
        try:
            positions.append([float(v) for v in fields[1:4]])
        except ValueError:
            raise ParseError(f"non-numeric coordinate in {lines[2 + k].strip()!r}", line=lineno) from None
    return Canvas(numbers, positions if positions else None), comment


def read_xyz(path: str | os.PathLike) -> Canvas:
    with open(path) as fh:
        canvas, _ = parse_xyz(fh.read())
    return canvas


def read_xyz_frames(path: str | os.PathLike) -> list[Canvas]:
    """All blocks of a multi-frame XYZ file."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    frames, i = [], 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        canvas, _ = parse_xyz(lines[i:], first_line=i + 1)
        frames.append(canvas)
        i += len(canvas) + 2
    return frames


def write_xyz(canvas: Canvas, path: str | os.PathLike, comment: str = "", append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        fh.write(format_xyz(canvas, comment))
