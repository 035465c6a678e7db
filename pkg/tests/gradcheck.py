"""Central finite-difference oracle for reverse-mode gradients."""
import numpy as np

from molbuild.nn.autodiff import Tensor, backward, mul, no_grad, tsum


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn, inputs, seed: int = 0, h: float = 1e-6) -> float:
    """Worst relative error between backward() and central differences of
    ``sum(w * fn(*inputs))`` for a random weighting ``w``."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    w = np.random.default_rng(seed).standard_normal(out.shape)
    backward(tsum(mul(out, w)))

    def scalar(xs):
        with no_grad():
            return float((fn(*[Tensor(x) for x in xs]).data * w).sum())

    worst = 0.0
    for k, (x, t) in enumerate(zip(inputs, tensors)):
        num = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            xs = [y.copy() for y in inputs]
            xs[k][idx] += h
            up = scalar(xs)
            xs[k][idx] -= 2 * h
            num[idx] = (up - scalar(xs)) / (2 * h)
        ana = t.grad if t.grad is not None else np.zeros_like(x)
        worst = max(worst, relative_error(ana, num))
    return worst


def gradcheck_params(loss_fn, params, seed: int = 0, h: float = 1e-6, coords: int = 40) -> float:
    """Relative error on a random subset of parameter coordinates for a
    scalar loss built from module parameters."""
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    backward(loss_fn())
    picks = []
    sizes = np.array([p.size for p in params], dtype=float)
    for _ in range(coords):
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        picks.append((i, tuple(int(rng.integers(n)) for n in params[i].shape)))
    ana, num = [], []
    for i, idx in picks:
        p = params[i]
        g = p.grad[idx] if p.grad is not None else 0.0
        old = p.data[idx]
        with no_grad():
            p.data[idx] = old + h
            up = loss_fn().item()
            p.data[idx] = old - h
            down = loss_fn().item()
        p.data[idx] = old
        ana.append(g)
        num.append((up - down) / (2 * h))
    return relative_error(np.array(ana), np.array(num))
