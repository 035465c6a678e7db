"""Optimal-return baselines by multi-start relaxation, and structure quality metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.optimize import minimize

from molbuild.chem import Bag, Canvas, atomic_number_of, bag_from_formula
from molbuild.energy import EnergyBackend, SurrogateBackend
from molbuild.errors import LineSearchFailure, NoGradientBackend
from molbuild.geometry import kabsch_rmsd, random_rotation
from molbuild.xyz import parse_xyz, write_xyz

BASELINE_HEADER = ("bag", "optimal_return", "xyz_path", "restarts", "seed")
MIN_SEPARATION = 0.6
BOX_SIZE = 3.0


@dataclass
class OptimizationResult:
    relaxed_canvas: Canvas
    energy: float
    iterations: int
    converged: bool
    rmsd_from_start: float


def lbfgs(fun, x0: np.ndarray, tol: float = 1e-6, max_iter: int = 5000):
    """Minimize ``fun(x) -> (f, grad)`` with L-BFGS until max |grad| <= tol.

    The line search only accepts decreasing steps. Returns (x, f, grad,
    iterations, converged); raises :class:`LineSearchFailure` carrying the
    best point when the search stalls before reaching the tolerance.
    """
    x0 = np.array(x0, dtype=np.float64)
    f0, g0 = fun(x0)
    if np.abs(g0).max() <= tol:
        return x0, f0, g0, 0, True
    res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                   options={"gtol": tol, "ftol": 0.0, "maxiter": max_iter, "maxcor": 10})
    f, g = fun(res.x)
    converged = bool(np.abs(g).max() <= tol)
    if not converged and res.nit < max_iter:
        raise LineSearchFailure(f"stalled after {res.nit} iterations: {res.message}",
                                best=(res.x, f, g, int(res.nit)))
    return res.x, f, g, int(res.nit), converged


def _objective(backend: EnergyBackend, numbers, base: np.ndarray, free: np.ndarray, rho: float,
               penalized: np.ndarray):
    if not backend.supports_gradient:
        raise NoGradientBackend(f"{type(backend).__name__} provides no position gradients")
    numbers = list(numbers)
    if isinstance(backend, SurrogateBackend):
        backend.params.check(numbers)

        def energy_grad(pos):
            return backend.positions_energy_and_gradient(numbers, pos)
    else:
        def energy_grad(pos):
            return backend.energy_and_gradient(Canvas(numbers, pos))

    def fun(x):
        pos = base.copy()
        pos[free] = x.reshape(-1, 3)
        e, grad = energy_grad(pos)
        if rho:
            r = np.linalg.norm(pos[penalized], axis=1)
            e += rho * r.sum()
            safe = np.where(r > 0, r, 1.0)[:, None]
            grad = grad.copy()
            grad[penalized] += rho * pos[penalized] / safe
        return e, grad[free].reshape(-1)

    return fun


def relax(canvas: Canvas, backend: EnergyBackend | None = None, tol: float = 1e-6, max_iter: int = 5000,
          fixed=None, rho: float = 0.0, penalized=None) -> OptimizationResult:
    """Local minimization of the energy (plus ``rho`` times the distance of
    ``penalized`` atoms from the origin), keeping ``fixed`` atoms in place."""
    backend = backend or SurrogateBackend()
    n = len(canvas)
    fixed_mask = np.zeros(n, dtype=bool) if fixed is None else np.asarray(fixed, dtype=bool)
    free = ~fixed_mask
    pen = np.zeros(n, dtype=bool) if penalized is None else np.asarray(penalized, dtype=bool)
    base = np.array(canvas.positions)
    fun = _objective(backend, canvas.numbers, base, free, rho, pen)
    try:
        x, f, _, it, conv = lbfgs(fun, base[free].reshape(-1), tol, max_iter)
    except LineSearchFailure as exc:
        x, f, _, it = exc.best
        conv = False
        pos = base.copy()
        pos[free] = x.reshape(-1, 3)
        best = Canvas(canvas.numbers, pos)
        exc.best = OptimizationResult(best, float(f), it, False, kabsch_rmsd(canvas, best))
        raise
    pos = base.copy()
    pos[free] = x.reshape(-1, 3)
    relaxed = Canvas(canvas.numbers, pos)
    return OptimizationResult(relaxed, float(f), it, conv, kabsch_rmsd(canvas, relaxed))


def _relax_best_effort(canvas, backend, **kw) -> OptimizationResult:
    try:
        return relax(canvas, backend, **kw)
    except LineSearchFailure as exc:
        return exc.best


def random_placement(numbers, rng: np.random.Generator, box: float = BOX_SIZE,
                     min_sep: float = MIN_SEPARATION) -> np.ndarray:
    """Uniform positions in a cube, redrawn until all pairs are at least ``min_sep`` apart."""
    n = len(numbers)
    while True:
        pos = rng.uniform(0.0, box, size=(n, 3))
        if n < 2:
            return pos
        d = np.sqrt(((pos[:, None] - pos[None]) ** 2).sum(-1))
        if d[np.triu_indices(n, 1)].min() >= min_sep:
            return pos


def _atomic_energies(backend: EnergyBackend, numbers) -> float:
    return sum(backend.atomic_energy(int(z)) for z in numbers)


@dataclass
class BaselineResult:
    bag: str
    optimal_return: float
    canvas: Canvas
    restarts: int
    seed: int
    xyz_path: str = ""


def optimal_return_single(bag: Bag | str, backend: EnergyBackend | None = None, restarts: int = 64,
                          seed: int = 0, xyz_path: str | None = None) -> BaselineResult:
    """Best return -(E(C*) - sum E(e_i)) over relaxations from random starts.

    Restart k always uses the k-th child of ``seed``, so more restarts can only
    raise the value. Ties go to the earliest restart.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    backend = backend or SurrogateBackend()
    bag = bag_from_formula(bag) if isinstance(bag, str) else bag
    numbers = bag.numbers
    ref = _atomic_energies(backend, numbers)
    best = None
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        rng = np.random.default_rng(child)
        start = Canvas(numbers, random_placement(numbers, rng))
        if len(numbers) < 2:
            result = OptimizationResult(start, backend.evaluate(start), 0, True, 0.0)
        else:
            result = _relax_best_effort(start, backend)
        value = -(result.energy - ref)
        if best is None or value > best[0]:
            best = (value, result.relaxed_canvas)
    out = BaselineResult(bag.formula, float(best[0]), best[1].centered(), restarts, seed)
    if xyz_path:
        write_xyz(out.canvas, xyz_path, f"{bag.formula} optimal_return={out.optimal_return:.10g}")
        out.xyz_path = xyz_path
    return out


WATER_GEOMETRY = np.array([[0.0, 0.0, 0.0], [0.9572, 0.0, 0.0], [-0.239987, 0.926627, 0.0]])


def optimal_return_solvation(solute: Canvas, n: int, rho: float, backend: EnergyBackend | None = None,
                             clusters: int = 12, seed: int = 0, radius: float = 3.0,
                             xyz_path: str | None = None) -> BaselineResult:
    """Best solvation return over relaxed random clusters of ``n`` waters around a fixed solute.

    Return = -(E(C) - E(C0) - sum E(e_i)) - rho * sum |x_i| over the added atoms.
    """
    if n < 0 or clusters < 1:
        raise ValueError("need n >= 0 and clusters >= 1")
    backend = backend or SurrogateBackend()
    solute = solute.centered()
    label = f"solvation_{n}xH2O"
    if n == 0:
        return BaselineResult(label, 0.0, solute, clusters, seed)
    e0 = backend.evaluate(solute)
    water = [atomic_number_of("O"), 1, 1]
    numbers = list(solute.numbers) + water * n
    ref = _atomic_energies(backend, water * n)
    m = len(solute)
    fixed = np.arange(len(numbers)) < m
    best = None
    for child in np.random.SeedSequence(seed).spawn(clusters):
        rng = np.random.default_rng(child)
        pos = _random_cluster(solute.positions, n, rng, radius)
        result = _relax_best_effort(Canvas(numbers, pos), backend, fixed=fixed, rho=rho, penalized=~fixed)
        added = result.relaxed_canvas.positions[m:]
        penalty = rho * float(np.linalg.norm(added, axis=1).sum())
        energy = result.energy - penalty  # relax reports the penalized objective
        value = -(energy - e0 - ref) - penalty
        if best is None or value > best[0]:
            best = (value, result.relaxed_canvas)
    out = BaselineResult(label, float(best[0]), best[1], clusters, seed)
    if xyz_path:
        write_xyz(out.canvas, xyz_path, f"{label} optimal_return={out.optimal_return:.10g}")
        out.xyz_path = xyz_path
    return out


def _random_cluster(solute_pos: np.ndarray, n: int, rng: np.random.Generator, radius: float) -> np.ndarray:
    placed = [p for p in solute_pos]
    for _ in range(n):
        while True:
            direction = rng.standard_normal(3)
            center = direction / np.linalg.norm(direction) * radius * rng.uniform(0.5, 1.0) ** (1 / 3)
            mol = WATER_GEOMETRY @ random_rotation(rng).T + center
            if not placed:
                break
            d = np.sqrt(((mol[:, None] - np.array(placed)[None]) ** 2).sum(-1))
            if d.min() >= MIN_SEPARATION:
                break
        placed.extend(mol)
    return np.array(placed)


def write_baseline_file(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BASELINE_HEADER)
        for r in results:
            w.writerow([r.bag, repr(float(r.optimal_return)), r.xyz_path, r.restarts, r.seed])


def read_baseline_file(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["bag"]: float(row["optimal_return"]) for row in csv.DictReader(fh)}


def packaged_baselines(solvation: bool = False) -> dict[str, float]:
    """Shipped surrogate optima (64 restarts, seed 0; solvation: 12 clusters, one refill)."""
    name = "baselines_solvation.csv" if solvation else "baselines.csv"
    with resources.as_file(resources.files("molbuild.data").joinpath(name)) as path:
        return read_baseline_file(path)


def packaged_baseline_structure(name: str) -> Canvas:
    """Shipped optimal structure, by formula (or ``solvation_n1``)."""
    try:
        text = resources.files("molbuild.data").joinpath("baselines", f"{name}.xyz").read_text()
    except FileNotFoundError:
        raise KeyError(f"no shipped baseline structure for {name!r}") from None
    return parse_xyz(text)[0]


# ---------------------------------------------------------------- structure assessment

@dataclass(frozen=True)
class ValidityRules:
    bond_tolerance: float
    radii: dict          # Z -> covalent radius
    degree: dict         # Z -> (min, max)
    resolution: float
    min_reference: float = 0.0  # floor on the radius-sum reference length

    @classmethod
    def default(cls) -> ValidityRules:
        text = resources.files("molbuild.data").joinpath("validity.json").read_text()
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_file(cls, path) -> ValidityRules:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def from_dict(cls, data: dict) -> ValidityRules:
        radii = {atomic_number_of(s): float(r) for s, r in data["covalent_radii"].items()}
        degree = {atomic_number_of(s): (int(lo), int(hi)) for s, (lo, hi) in data["degree"].items()}
        return cls(float(data["bond_tolerance"]), radii, degree, float(data.get("diversity_resolution", 0.05)),
                   float(data.get("min_reference", 0.0)))


def bond_graph(canvas: Canvas, rules: ValidityRules) -> list[tuple[int, int]] | None:
    """Bonded pairs (i < j); None if an element has no radius."""
    if any(z not in rules.radii for z in canvas.numbers):
        return None
    pos = canvas.positions
    bonds = []
    for i in range(len(canvas)):
        for j in range(i + 1, len(canvas)):
            reference = rules.radii[canvas.numbers[i]] + rules.radii[canvas.numbers[j]]
            limit = rules.bond_tolerance * max(reference, rules.min_reference)
            if np.linalg.norm(pos[i] - pos[j]) < limit:
                bonds.append((i, j))
    return bonds


def _components(n: int, bonds) -> int:
    parent = list(range(n))

    def root(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in bonds:
        parent[root(i)] = root(j)
    return len({root(i) for i in range(n)})


def is_valid(canvas: Canvas, rules: ValidityRules | None = None, allow_fragments: bool = False) -> bool:
    """Bond-heuristic validity: allowed degrees everywhere and (unless allowed) one fragment."""
    rules = rules or ValidityRules.default()
    if len(canvas) == 0:
        return False
    bonds = bond_graph(canvas, rules)
    if bonds is None:
        return False
    degree = np.zeros(len(canvas), dtype=int)
    for i, j in bonds:
        degree[i] += 1
        degree[j] += 1
    for z, k in zip(canvas.numbers, degree):
        lo, hi = rules.degree.get(z, (0, -1))
        if len(canvas) == 1:
            lo = 0
        if not lo <= k <= hi:
            return False
    return allow_fragments or _components(len(canvas), bonds) == 1


def structure_key(canvas: Canvas, rules: ValidityRules | None = None) -> tuple:
    """Cheap isomorphism proxy: element-degree multiset plus binned bond lengths."""
    rules = rules or ValidityRules.default()
    bonds = bond_graph(canvas, rules) or []
    degree = np.zeros(len(canvas), dtype=int)
    for i, j in bonds:
        degree[i] += 1
        degree[j] += 1
    pos = canvas.positions
    lengths = sorted(int(round(np.linalg.norm(pos[i] - pos[j]) / rules.resolution)) for i, j in bonds)
    return tuple(sorted(zip(canvas.numbers, degree.tolist()))), tuple(lengths)


@dataclass
class Assessment:
    validity: float
    rmsd: float
    diversity: int
    n_structures: int

    def table(self) -> str:
        return ("Validity,RMSD,Diversity\n"
                f"{self.validity:.3f},{self.rmsd:.4f},{self.diversity}\n")


def assess_structures(canvases, backend: EnergyBackend | None = None, rules: ValidityRules | None = None,
                      allow_fragments: bool = False) -> Assessment:
    canvases = list(canvases)
    if not canvases:
        raise ValueError("need at least one structure")
    rules = rules or ValidityRules.default()
    backend = backend or SurrogateBackend()
    valid = [c for c in canvases if is_valid(c, rules, allow_fragments)]
    rmsds = [kabsch_rmsd(c, _relax_best_effort(c, backend).relaxed_canvas) for c in valid if len(c) > 1]
    rmsd = float(np.median(rmsds)) if rmsds else float("nan")
    keys = {structure_key(c, rules) for c in valid}
    return Assessment(len(valid) / len(canvases), rmsd, len(keys), len(canvases))

