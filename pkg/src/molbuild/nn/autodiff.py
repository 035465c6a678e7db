"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is recorded dynamically: every operation on a :class:`Tensor` that
requires gradients stores its parents and a backward closure. ``backward``
walks the graph once in reverse topological order and then releases it, so a
second call on the same loss raises :class:`TapeExhausted`.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from molbuild import kernels
from molbuild.errors import NotScalar, ShapeMismatch, TapeExhausted

LOG_ZERO = -1e9  # log-probability reported for masked entries

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them (rollouts, evaluation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __getitem__ = lambda self, idx: take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise NotScalar(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeExhausted("this graph was already differentiated; run the forward pass again")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_LOG2 = float(np.log(2.0))


def shifted_softplus(a) -> Tensor:
    """ln(0.5 e^x + 0.5), zero at the origin."""
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.maximum(x, 0.0) + np.log1p(e) - _LOG2
    inv = 1.0 / (1.0 + e)
    sig = np.where(x >= 0, inv, e * inv)
    return _result(out, (a,), lambda g: (g * sig,))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(mask, a, fill: float) -> Tensor:
    """``a`` where ``mask`` is true, the constant ``fill`` elsewhere."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    return _result(np.where(mask, a.data, fill), (a,), lambda g: (_unbroadcast(g * mask, a.shape),))


# ---------------------------------------------------------------- linear algebra / shapes

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeMismatch(f"cannot multiply {ad.shape} by {bd.shape}")
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T if a.requires_grad else None,
                                               ad.T @ g if b.requires_grad else None))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, index) -> Tensor:
    """Rows ``a[index]`` for an integer index array (gather along axis 0)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]

    def bw(g):
        return (kernels.segment_sum(g, index.reshape(-1), n).reshape(a.shape),)

    return _result(a.data[index], (a,), bw)


def pick(a, index) -> Tensor:
    """``a[i, index[i]]`` for every row ``i`` of a 2D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def bw(g):
        out = np.zeros(a.shape)
        out[rows, index] = g
        return (out,)

    return _result(a.data[rows, index], (a,), bw)


def segment_sum(a, segments, n: int) -> Tensor:
    """Sum rows of ``a`` into ``n`` buckets given by ``segments``."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.intp)
    return _result(kernels.segment_sum(a.data, segments, n), (a,), lambda g: (g[segments],))


# ---------------------------------------------------------------- distributions

def log_softmax(a, mask=None) -> Tensor:
    """Row-wise log-softmax over the last axis of a 2D tensor.

    Entries where ``mask`` is false get probability zero and log-probability
    :data:`LOG_ZERO`; they receive no gradient.
    """
    a = as_tensor(a)
    x = a.data
    mask = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    xm = np.where(mask, x, -np.inf)
    top = xm.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    z = np.where(mask, np.exp(xm - top), 0.0)
    lse = np.log(z.sum(axis=-1, keepdims=True)) + top
    out = np.where(mask, x - lse, LOG_ZERO)
    p = np.where(mask, np.exp(out), 0.0)

    def bw(g):
        gm = np.where(mask, g, 0.0)
        return (gm - p * gm.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), bw)


def segment_log_softmax(a, segments, n: int, mask=None) -> Tensor:
    """Log-softmax of a 1D tensor within each segment (variable-size categoricals)."""
    a = as_tensor(a)
    x = a.data
    segments = np.asarray(segments, dtype=np.intp)
    mask = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    xm = np.where(mask, x, -np.inf)
    top = np.full(n, -np.inf)
    np.maximum.at(top, segments, xm)
    top = np.where(np.isfinite(top), top, 0.0)
    z = np.where(mask, np.exp(xm - top[segments]), 0.0)
    with np.errstate(divide="ignore"):  # empty segments are never read
        lse = np.log(kernels.segment_sum(z, segments, n)) + top
    out = np.where(mask, x - lse[segments], LOG_ZERO)
    p = np.where(mask, np.exp(out), 0.0)

    def bw(g):
        gm = np.where(mask, g, 0.0)
        return (gm - p * kernels.segment_sum(gm, segments, n)[segments],)

    return _result(out, (a,), bw)
