# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contracts as ``_fallback.py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, sin, cos, asin, atan2, fabs, M_PI, NAN

from molbuild.errors import DegenerateFrame

cnp.import_array()

cdef double COINCIDENT_TOL = 1e-8


def segment_sum(values, index, Py_ssize_t n):
    values = np.asarray(values, dtype=np.float64)
    cdef Py_ssize_t width = int(np.prod(values.shape[1:]))
    cdef const double[:, ::1] v = np.ascontiguousarray(values).reshape(len(index), width)
    cdef const cnp.intp_t[::1] idx = np.ascontiguousarray(index, dtype=np.intp)
    cdef Py_ssize_t p, k, row, nf = v.shape[1], npairs = v.shape[0]
    out = np.zeros((n, width))
    cdef double[:, ::1] o = out
    for p in range(npairs):
        row = idx[p]
        for k in range(nf):
            o[row, k] += v[p, k]
    return out.reshape((n,) + values.shape[1:])


def pair_graph(positions, double cutoff):
    cdef const double[:, ::1] pos = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t n = pos.shape[0], i, j, m = 0
    ii = np.empty(n * n, dtype=np.intp)
    jj = np.empty(n * n, dtype=np.intp)
    dd = np.empty(n * n)
    cdef cnp.intp_t[::1] vi = ii, vj = jj
    cdef double[::1] vd = dd
    cdef double dx, dy, dz, r
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            r = sqrt(dx * dx + dy * dy + dz * dz)
            if r < cutoff:
                vi[m] = i
                vj[m] = j
                vd[m] = r
                m += 1
    return ii[:m].copy(), jj[:m].copy(), dd[:m].copy()


def morse_energy(positions, numbers, well, width, r0):
    cdef const double[:, ::1] pos = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    cdef const cnp.intp_t[::1] z = np.ascontiguousarray(numbers, dtype=np.intp)
    cdef const double[:, ::1] dw = np.ascontiguousarray(well, dtype=np.float64)
    cdef const double[:, ::1] aw = np.ascontiguousarray(width, dtype=np.float64)
    cdef const double[:, ::1] rr = np.ascontiguousarray(r0, dtype=np.float64)
    cdef Py_ssize_t n = pos.shape[0], i, j
    cdef double energy = 0.0, dx, dy, dz, r, e
    for i in range(n):
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            r = sqrt(dx * dx + dy * dy + dz * dz)
            e = exp(-aw[z[i], z[j]] * (r - rr[z[i], z[j]]))
            energy += dw[z[i], z[j]] * ((1.0 - e) * (1.0 - e) - 1.0)
    return energy


def morse_energy_grad(positions, numbers, well, width, r0):
    cdef const double[:, ::1] pos = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    cdef const cnp.intp_t[::1] z = np.ascontiguousarray(numbers, dtype=np.intp)
    cdef const double[:, ::1] dw = np.ascontiguousarray(well, dtype=np.float64)
    cdef const double[:, ::1] aw = np.ascontiguousarray(width, dtype=np.float64)
    cdef const double[:, ::1] rr = np.ascontiguousarray(r0, dtype=np.float64)
    cdef Py_ssize_t n = pos.shape[0], i, j
    grad = np.zeros((n, 3))
    cdef double[:, ::1] g = grad
    cdef double energy = 0.0, dx, dy, dz, r, e, a, d, s
    for i in range(n):
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            r = sqrt(dx * dx + dy * dy + dz * dz)
            a = aw[z[i], z[j]]
            d = dw[z[i], z[j]]
            e = exp(-a * (r - rr[z[i], z[j]]))
            energy += d * ((1.0 - e) * (1.0 - e) - 1.0)
            s = 2.0 * d * a * e * (1.0 - e) / r
            g[i, 0] += s * dx
            g[i, 1] += s * dy
            g[i, 2] += s * dz
            g[j, 0] -= s * dx
            g[j, 1] -= s * dy
            g[j, 2] -= s * dz
    return energy, grad


cdef inline double _dot(double* a, double* b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef inline double _norm(double* a):
    return sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


cdef inline void _cross(double* a, double* b, double* out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef void _reference_perp(double* u, double* v):
    cdef double c = u[1], nv
    v[0] = -c * u[0]
    v[1] = 1.0 - c * u[1]
    v[2] = -c * u[2]
    nv = _norm(v)
    if nv < 1e-6:
        c = u[2]
        v[0] = -c * u[0]
        v[1] = -c * u[1]
        v[2] = 1.0 - c * u[2]
        nv = _norm(v)
    v[0] /= nv
    v[1] /= nv
    v[2] /= nv


cdef double _frame_axes(double* xf, double* xn1, double* xn2, int arity,
                        double* u, double* v, double* w) except -1.0:
    cdef double b[3]
    cdef double c[3]
    cdef double t[3]
    cdef double length, cu, nc
    cdef int k, have_v = 0
    for k in range(3):
        b[k] = xn1[k] - xf[k]
    length = _norm(b)
    if length < COINCIDENT_TOL:
        raise DegenerateFrame("focal atom and first neighbour coincide")
    for k in range(3):
        u[k] = b[k] / length
    if arity >= 3:
        for k in range(3):
            c[k] = xn2[k] - xn1[k]
            t[k] = xn2[k] - xf[k]
        if _norm(c) < COINCIDENT_TOL or _norm(t) < COINCIDENT_TOL:
            raise DegenerateFrame("second neighbour coincides with another reference atom")
        cu = _dot(c, u)
        for k in range(3):
            c[k] -= cu * u[k]
        nc = _norm(c)
        if nc >= COINCIDENT_TOL:
            for k in range(3):
                v[k] = c[k] / nc
            have_v = 1
    if not have_v:
        _reference_perp(u, v)
    _cross(u, v, w)
    return length


cdef inline void _load(object src, double* dst):
    if src is None:
        dst[0] = 0.0
        dst[1] = 0.0
        dst[2] = 0.0
    else:
        dst[0] = src[0]
        dst[1] = src[1]
        dst[2] = src[2]


def place_atom(xf_, xn1_, xn2_, int arity, double d, double alpha, double psi):
    cdef double xf[3]
    cdef double xn1[3]
    cdef double xn2[3]
    cdef double u[3]
    cdef double v[3]
    cdef double w[3]
    cdef double length, s, gamma, cg, sg, cp, sp
    cdef int k
    cdef bint clamped
    _load(xf_, xf)
    out = np.empty(3)
    cdef double[::1] o = out
    if arity == 1:
        o[0] = xf[0] + d
        o[1] = xf[1]
        o[2] = xf[2]
        return out, False
    _load(xn1_, xn1)
    _load(xn2_ if arity >= 3 else None, xn2)
    length = _frame_axes(xf, xn1, xn2, arity, u, v, w)
    s = d * sin(alpha) / length
    clamped = s > 1.0
    if s > 1.0:
        s = 1.0
    if s < 0.0:
        s = 0.0
    gamma = M_PI - alpha - asin(s)
    if gamma < 0.0:
        gamma = 0.0
        clamped = True
    if arity == 2:
        psi = 0.0
    cg = cos(gamma)
    sg = sin(gamma)
    cp = cos(psi)
    sp = sin(psi)
    for k in range(3):
        o[k] = xf[k] + d * (cg * u[k] + sg * (cp * v[k] + sp * w[k]))
    return out, bool(clamped)


def measure_internal(xf_, xn1_, xn2_, int arity, x_):
    cdef double xf[3]
    cdef double xn1[3]
    cdef double xn2[3]
    cdef double x[3]
    cdef double p[3]
    cdef double a[3]
    cdef double b[3]
    cdef double cr[3]
    cdef double q[3]
    cdef double u[3]
    cdef double v[3]
    cdef double w[3]
    cdef double d, alpha, pu
    cdef int k
    _load(xf_, xf)
    _load(x_, x)
    for k in range(3):
        p[k] = x[k] - xf[k]
    d = _norm(p)
    if arity == 1:
        return d, NAN, NAN
    _load(xn1_, xn1)
    for k in range(3):
        a[k] = xf[k] - x[k]
        b[k] = xn1[k] - x[k]
    _cross(a, b, cr)
    alpha = atan2(_norm(cr), _dot(a, b))
    _load(xn2_ if arity >= 3 else None, xn2)
    _frame_axes(xf, xn1, xn2, arity, u, v, w)
    if arity == 2:
        return d, alpha, NAN
    pu = _dot(p, u)
    for k in range(3):
        q[k] = p[k] - pu * u[k]
    return d, alpha, atan2(_dot(q, w), _dot(q, v))
