"""Pure-Python/numpy versions of the hot kernels.

Every function here has a twin with the same signature in ``_core.pyx``;
the test suite checks the two agree.
"""
import math

import numpy as np

from molbuild.errors import DegenerateFrame

COINCIDENT_TOL = 1e-8


def segment_sum(values, index, n):
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, np.asarray(index, dtype=np.intp), values)
    return out


def pair_graph(positions, cutoff):
    """Ordered pairs (i, j), i != j, closer than ``cutoff``; sorted by i then j."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 2:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty.copy(), np.zeros(0)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    mask = dist < cutoff
    np.fill_diagonal(mask, False)
    i, j = np.nonzero(mask)
    return i.astype(np.intp), j.astype(np.intp), dist[i, j]


def morse_energy(positions, numbers, well, width, r0):
    pos = np.asarray(positions, dtype=np.float64)
    z = np.asarray(numbers, dtype=np.intp)
    n = pos.shape[0]
    if n < 2:
        return 0.0
    i, j = np.triu_indices(n, 1)
    r = np.sqrt(((pos[i] - pos[j]) ** 2).sum(-1))
    zi, zj = z[i], z[j]
    e = np.exp(-width[zi, zj] * (r - r0[zi, zj]))
    return float(np.sum(well[zi, zj] * ((1.0 - e) ** 2 - 1.0)))


def morse_energy_grad(positions, numbers, well, width, r0):
    pos = np.asarray(positions, dtype=np.float64)
    z = np.asarray(numbers, dtype=np.intp)
    n = pos.shape[0]
    grad = np.zeros((n, 3))
    if n < 2:
        return 0.0, grad
    i, j = np.triu_indices(n, 1)
    diff = pos[i] - pos[j]
    r = np.sqrt((diff ** 2).sum(-1))
    zi, zj = z[i], z[j]
    dw, a = well[zi, zj], width[zi, zj]
    e = np.exp(-a * (r - r0[zi, zj]))
    energy = float(np.sum(dw * ((1.0 - e) ** 2 - 1.0)))
    de_dr = 2.0 * dw * a * e * (1.0 - e)
    f = (de_dr / r)[:, None] * diff
    np.add.at(grad, i, f)
    np.add.at(grad, j, -f)
    return energy, grad


def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _norm(a):
    return math.sqrt(_dot(a, a))


def _reference_perp(u):
    # +y projected off the axis; +z when the axis is (nearly) along y
    ref = (0.0, 1.0, 0.0)
    c = _dot(ref, u)
    v = (ref[0] - c * u[0], ref[1] - c * u[1], ref[2] - c * u[2])
    nv = _norm(v)
    if nv < 1e-6:
        ref = (0.0, 0.0, 1.0)
        c = _dot(ref, u)
        v = (ref[0] - c * u[0], ref[1] - c * u[1], ref[2] - c * u[2])
        nv = _norm(v)
    return (v[0] / nv, v[1] / nv, v[2] / nv)


def _frame_axes(xf, xn1, xn2, arity):
    b = _sub(xn1, xf)
    length = _norm(b)
    if length < COINCIDENT_TOL:
        raise DegenerateFrame("focal atom and first neighbour coincide")
    u = (b[0] / length, b[1] / length, b[2] / length)
    v = None
    if arity >= 3:
        if _norm(_sub(xn2, xn1)) < COINCIDENT_TOL or _norm(_sub(xn2, xf)) < COINCIDENT_TOL:
            raise DegenerateFrame("second neighbour coincides with another reference atom")
        c = _sub(xn2, xn1)
        cu = _dot(c, u)
        p = (c[0] - cu * u[0], c[1] - cu * u[1], c[2] - cu * u[2])
        np_ = _norm(p)
        if np_ >= COINCIDENT_TOL:
            v = (p[0] / np_, p[1] / np_, p[2] / np_)
    if v is None:
        v = _reference_perp(u)
    return u, v, _cross(u, v), length


def place_atom(xf, xn1, xn2, arity, d, alpha, psi):
    """Cartesian position from (d, alpha, signed psi); returns (x, clamped)."""
    xf = (float(xf[0]), float(xf[1]), float(xf[2]))
    if arity == 1:
        return np.array([xf[0] + d, xf[1], xf[2]]), False
    xn1 = (float(xn1[0]), float(xn1[1]), float(xn1[2]))
    if arity >= 3:
        xn2 = (float(xn2[0]), float(xn2[1]), float(xn2[2]))
    u, v, w, length = _frame_axes(xf, xn1, xn2, arity)
    s = d * math.sin(alpha) / length
    clamped = s > 1.0
    s = min(max(s, 0.0), 1.0)
    gamma = math.pi - alpha - math.asin(s)
    if gamma < 0.0:
        gamma = 0.0
        clamped = True
    if arity == 2:
        psi = 0.0
    cg, sg = math.cos(gamma), math.sin(gamma)
    cp, sp = math.cos(psi), math.sin(psi)
    x = [xf[k] + d * (cg * u[k] + sg * (cp * v[k] + sp * w[k])) for k in range(3)]
    return np.array(x), clamped


def measure_internal(xf, xn1, xn2, arity, x):
    """Inverse of :func:`place_atom`: (d, alpha, signed psi), NaN where unused."""
    xf = (float(xf[0]), float(xf[1]), float(xf[2]))
    x = (float(x[0]), float(x[1]), float(x[2]))
    p = _sub(x, xf)
    d = _norm(p)
    if arity == 1:
        return d, math.nan, math.nan
    xn1 = (float(xn1[0]), float(xn1[1]), float(xn1[2]))
    a = _sub(xf, x)
    b = _sub(xn1, x)
    alpha = math.atan2(_norm(_cross(a, b)), _dot(a, b))
    if arity == 2:
        _frame_axes(xf, xn1, xn2, arity)
        return d, alpha, math.nan
    xn2 = (float(xn2[0]), float(xn2[1]), float(xn2[2]))
    u, v, w, _ = _frame_axes(xf, xn1, xn2, arity)
    pu = _dot(p, u)
    q = (p[0] - pu * u[0], p[1] - pu * u[1], p[2] - pu * u[2])
    psi = math.atan2(_dot(q, w), _dot(q, v))
    return d, alpha, psi
