"""Internal coordinates relative to a focal atom, and Kabsch alignment.

A new atom ``x`` is located by

* ``d``: distance from the focal atom ``x_f``,
* ``alpha``: the angle *at x* between the lines to ``x_f`` and ``x_n1``,
* ``psi``: the dihedral between planes (x, x_f, x_n1) and (x_f, x_n1, x_n2),
  split into ``abs_psi`` and a sign ``kappa``.

``x_n1`` and ``x_n2`` are the nearest and second-nearest atoms to the focal
atom (ties go to the lower canvas index).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from molbuild import kernels
from molbuild.chem import Canvas
from molbuild.errors import InvalidFocal, ShapeMismatch

REFERENCE_DIRECTION = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class LocalFrame:
    focal_position: np.ndarray
    neighbor1_position: np.ndarray | None = None
    neighbor2_position: np.ndarray | None = None
    arity: int = 1

    def transformed(self, rotation, translation) -> LocalFrame:
        def move(p):
            return None if p is None else np.asarray(rotation) @ p + translation

        return LocalFrame(move(self.focal_position), move(self.neighbor1_position),
                          move(self.neighbor2_position), self.arity)


@dataclass(frozen=True)
class InternalCoordinates:
    """Measured internal coordinates; unused components are ``None``."""

    distance: float
    angle: float | None
    abs_dihedral: float | None
    kappa: int | None


def local_frame(canvas: Canvas, focal: int) -> LocalFrame:
    n = len(canvas)
    if n == 0 or not 0 <= focal < n:
        raise InvalidFocal(f"focal index {focal} outside canvas of {n} atoms")
    pos = canvas.positions
    xf = pos[focal]
    if n == 1:
        return LocalFrame(xf, None, None, 1)
    dist = np.sqrt(((pos - xf) ** 2).sum(axis=1))
    dist[focal] = np.inf
    order = np.argsort(dist, kind="stable")
    n1 = pos[order[0]]
    if n == 2:
        return LocalFrame(xf, n1, None, 2)
    return LocalFrame(xf, n1, pos[order[1]], 3)


def position_from_internal(frame: LocalFrame, d: float, alpha: float = 0.0,
                           abs_psi: float = 0.0, kappa: int = 1) -> np.ndarray:
    """Cartesian position for internal coordinates in ``frame``.

    Raises :class:`~molbuild.errors.DegenerateFrame` if reference atoms coincide.
    """
    x, _ = place(frame, d, alpha, abs_psi, kappa)
    return x


def place(frame: LocalFrame, d: float, alpha: float = 0.0, abs_psi: float = 0.0,
          kappa: int = 1) -> tuple[np.ndarray, bool]:
    """Like :func:`position_from_internal` but also reports whether the
    law-of-sines argument had to be clamped (infeasible triangle)."""
    psi = (1.0 if kappa >= 0 else -1.0) * abs_psi
    return kernels.place_atom(frame.focal_position, frame.neighbor1_position,
                              frame.neighbor2_position, frame.arity,
                              float(d), float(alpha), psi)


def internal_from_position(frame: LocalFrame, x) -> InternalCoordinates:
    d, alpha, psi = kernels.measure_internal(frame.focal_position, frame.neighbor1_position,
                                             frame.neighbor2_position, frame.arity, x)
    if frame.arity == 1:
        return InternalCoordinates(d, None, None, None)
    if frame.arity == 2:
        return InternalCoordinates(d, alpha, None, None)
    return InternalCoordinates(d, alpha, abs(psi), 1 if psi >= 0 else -1)


def kabsch_transform(mobile: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Proper rotation R and translation t minimising |R @ mobile + t - target|."""
    mc = mobile.mean(axis=0)
    tc = target.mean(axis=0)
    h = (mobile - mc).T @ (target - tc)
    u, _, vt = np.linalg.svd(h)
    sign = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    rot = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return rot, tc - rot @ mc


def kabsch_rmsd(canvas_a: Canvas, canvas_b: Canvas) -> float:
    """RMSD after optimal superposition; atoms correspond by index."""
    if len(canvas_a) != len(canvas_b):
        raise ShapeMismatch(f"atom counts differ: {len(canvas_a)} vs {len(canvas_b)}")
    if sorted(canvas_a.numbers) != sorted(canvas_b.numbers):
        raise ShapeMismatch("canvases hold different element multisets")
    n = len(canvas_a)
    if n == 0:
        return 0.0
    a = canvas_a.positions
    b = canvas_b.positions
    rot, t = kabsch_transform(a, b)
    diff = a @ rot.T + t - b
    return math.sqrt(max(float((diff ** 2).sum()) / n, 0.0))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
