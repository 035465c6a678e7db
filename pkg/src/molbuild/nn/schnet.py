"""Continuous-filter convolution encoder producing invariant per-atom embeddings.

Canvases of different sizes are processed together: a :class:`GraphBatch`
concatenates the atoms of all canvases and keeps directed neighbour pairs
(within one canvas, closer than the cutoff) with their radial features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from molbuild import kernels
from molbuild.chem import DEFAULT_E_MAX, Canvas
from molbuild.nn import autodiff as ad
from molbuild.nn.autodiff import Tensor
from molbuild.nn.layers import Linear, Module


@dataclass(frozen=True)
class SchNetConfig:
    n_interactions: int = 3
    cutoff: float = 5.0
    n_filters: int = 128
    n_atom_basis: int = 64
    n_rbf: int = 32
    e_max: int = DEFAULT_E_MAX

    def __post_init__(self):
        for name in ("n_interactions", "n_filters", "n_atom_basis", "n_rbf", "e_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cutoff <= 0 or self.n_rbf < 2:
            raise ValueError("need cutoff > 0 and at least two radial basis functions")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.cutoff, self.n_rbf)

    @property
    def gamma(self) -> float:
        spacing = self.cutoff / (self.n_rbf - 1)
        return 1.0 / (2.0 * spacing ** 2)


def rbf_expand(distance, config: SchNetConfig) -> np.ndarray:
    """Gaussians exp(-gamma (d - mu_k)^2) on centres spread evenly over [0, cutoff]."""
    d = np.asarray(distance, dtype=np.float64)
    return np.exp(-config.gamma * (d[..., None] - config.centers) ** 2)


def cosine_cutoff(distance, cutoff: float) -> np.ndarray:
    d = np.asarray(distance, dtype=np.float64)
    return np.where(d < cutoff, 0.5 * (np.cos(np.pi * d / cutoff) + 1.0), 0.0)


class CanvasGraph:
    """Directed neighbour pairs and their distances for one canvas (fixed geometry)."""

    __slots__ = ("numbers", "pair_i", "pair_j", "distance")

    def __init__(self, numbers, positions, config: SchNetConfig):
        self.numbers = np.asarray(numbers, dtype=np.intp)
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.pair_i, self.pair_j, self.distance = kernels.pair_graph(pos, config.cutoff)

    @classmethod
    def from_canvas(cls, canvas: Canvas, config: SchNetConfig) -> CanvasGraph:
        return cls(canvas.numbers, canvas.positions, config)

    def __len__(self) -> int:
        return len(self.numbers)


class GraphBatch:
    """Several canvas graphs stacked into one disconnected graph, with radial features."""

    __slots__ = ("numbers", "mol", "n_mols", "offsets", "counts", "pair_i", "pair_j", "rbf", "fcut")

    def __init__(self, graphs: list[CanvasGraph], config: SchNetConfig):
        counts = np.array([len(g) for g in graphs], dtype=np.intp)
        offsets = np.zeros(len(graphs), dtype=np.intp)
        if len(graphs) > 1:
            offsets[1:] = np.cumsum(counts)[:-1]
        self.counts, self.offsets, self.n_mols = counts, offsets, len(graphs)
        self.mol = np.repeat(np.arange(len(graphs), dtype=np.intp), counts)
        if graphs:
            self.numbers = np.concatenate([g.numbers for g in graphs])
            self.pair_i = np.concatenate([g.pair_i + o for g, o in zip(graphs, offsets)])
            self.pair_j = np.concatenate([g.pair_j + o for g, o in zip(graphs, offsets)])
            distance = np.concatenate([g.distance for g in graphs])
        else:
            self.numbers = np.zeros(0, dtype=np.intp)
            self.pair_i = self.pair_j = np.zeros(0, dtype=np.intp)
            distance = np.zeros(0)
        self.rbf = rbf_expand(distance, config).reshape(-1, config.n_rbf)
        self.fcut = cosine_cutoff(distance, config.cutoff)[:, None]

    @property
    def n_atoms(self) -> int:
        return len(self.numbers)


class Interaction(Module):
    def __init__(self, config: SchNetConfig, rng: np.random.Generator):
        nf, na = config.n_filters, config.n_atom_basis
        self.filter_in = Linear(config.n_rbf, nf, rng)
        self.filter_out = Linear(nf, nf, rng)
        self.in2f = Linear(na, nf, rng, bias=False)
        self.f2out = Linear(nf, na, rng)
        self.dense = Linear(na, na, rng)

    def __call__(self, x: Tensor, batch: GraphBatch) -> Tensor:
        w = self.filter_out(ad.shifted_softplus(self.filter_in(Tensor(batch.rbf))))
        w = w * batch.fcut
        y = self.in2f(x)
        messages = ad.take(y, batch.pair_j) * w
        agg = ad.segment_sum(messages, batch.pair_i, batch.n_atoms)
        v = self.dense(ad.shifted_softplus(self.f2out(agg)))
        return x + v


class SchNet(Module):
    def __init__(self, config: SchNetConfig, rng: np.random.Generator):
        self.config = config
        self.embedding = Tensor(rng.standard_normal((config.e_max, config.n_atom_basis)),
                                requires_grad=True)
        self.interactions = [Interaction(config, rng) for _ in range(config.n_interactions)]

    def graph(self, canvas: Canvas) -> CanvasGraph:
        return CanvasGraph.from_canvas(canvas, self.config)

    def batch(self, graphs: list[CanvasGraph]) -> GraphBatch:
        return GraphBatch(graphs, self.config)

    def __call__(self, batch: GraphBatch) -> Tensor:
        x = ad.take(self.embedding, batch.numbers - 1)
        for block in self.interactions:
            x = block(x, batch)
        return x


def schnet_embed(canvas: Canvas, model: SchNet) -> np.ndarray:
    """Per-atom embeddings (n_atoms x n_atom_basis) of one canvas."""
    with ad.no_grad():
        return model(model.batch([model.graph(canvas)])).data
