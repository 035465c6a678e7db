"""Episodic atom-placement tasks: single-bag, multi-bag and solvation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Sequence

import numpy as np

from molbuild.chem import DEFAULT_E_MAX, Action, Bag, Canvas, State, bag_from_formula, transition
from molbuild.energy import EnergyBackend, SurrogateBackend
from molbuild.errors import (BackendError, ConfigError, DegenerateFrame, ElementNotInBag,
                             EpisodeFinished, InvalidFocal, MissingPairParams)
from molbuild.geometry import internal_from_position, local_frame, position_from_internal
from molbuild.xyz import parse_xyz

SINGLE_BAG = "single_bag"
MULTI_BAG = "multi_bag"
SOLVATION = "solvation"
KINDS = (SINGLE_BAG, MULTI_BAG, SOLVATION)

WATER = bag_from_formula("H2O")


@dataclass(frozen=True)
class TaskConfig:
    kind: str = SINGLE_BAG
    bags: tuple = ()
    initial_canvas: Canvas = field(default_factory=Canvas)
    n_bags: int = 1
    rho: float = 0.0
    reward_floor: float = -0.6
    min_dist: float = 0.6
    max_dist: float = 2.0
    d_min: float = 0.95
    d_max: float = 1.80
    e_max: int = DEFAULT_E_MAX

    def __post_init__(self):
        bags = tuple(bag_from_formula(b) if isinstance(b, str) else b for b in self.bags)
        if self.kind == SOLVATION and not bags:
            bags = (WATER,)
        object.__setattr__(self, "bags", bags)
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if not bags:
            raise ConfigError("a task needs at least one bag")
        if self.kind == SINGLE_BAG and len(bags) != 1:
            raise ConfigError("single_bag tasks take exactly one bag")
        if self.kind == SOLVATION:
            if self.n_bags < 1:
                raise ConfigError("solvation needs n_bags >= 1")
            if len(bags) != 1:
                raise ConfigError("solvation refills a single bag")
            # the distance penalty is measured from the origin
            object.__setattr__(self, "initial_canvas", self.initial_canvas.centered())
        if not self.reward_floor < 0:
            raise ConfigError("reward_floor must be negative")
        if not 0 < self.min_dist < self.max_dist:
            raise ConfigError("need 0 < min_dist < max_dist")
        if not 0 < self.d_min < self.d_max:
            raise ConfigError("need 0 < d_min < d_max")
        for bag in bags:
            if bag.total == 0:
                raise ConfigError("empty bag in task")
            if max(bag.numbers) > self.e_max:
                raise ConfigError(f"bag {bag.formula} has an element beyond e_max={self.e_max}")
        for z in self.initial_canvas.numbers:
            if z > self.e_max:
                raise ConfigError(f"initial canvas element Z={z} exceeds e_max")

    @property
    def max_episode_length(self) -> int:
        if self.kind == SOLVATION:
            return self.bags[0].total * self.n_bags
        return max(b.total for b in self.bags)

    def with_bags(self, bags) -> TaskConfig:
        return replace(self, bags=tuple(bags))


@dataclass(frozen=True)
class StepResult:
    next_state: State
    reward: float
    done: bool
    info: dict


def valid_action_masks(state: State, e_max: int = DEFAULT_E_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Focal mask over canvas atoms (all valid) and element mask over Z = 1..e_max."""
    focal = np.ones(len(state.canvas), dtype=bool)
    return focal, state.bag.vector(e_max) > 0


def clamp_internal(action: Action, d_min: float, d_max: float) -> tuple[float, float, float]:
    d = min(max(action.distance, 0.25 * d_min), 4.0 * d_max)
    alpha = min(max(action.angle, 0.0), math.pi)
    psi = min(max(action.abs_dihedral, 0.0), math.pi)
    return d, alpha, psi


def resolve_position(canvas: Canvas, action: Action, d_min: float, d_max: float) -> np.ndarray:
    """Cartesian position of the atom an action places (origin on an empty canvas)."""
    if len(canvas) == 0:
        return np.zeros(3)
    frame = local_frame(canvas, action.focal)
    d, alpha, psi = clamp_internal(action, d_min, d_max)
    return position_from_internal(frame, d, alpha, psi, action.kappa)


class MolEnv:
    """One episodic environment instance; owns its RNG, not thread-shared."""

    def __init__(self, config: TaskConfig, backend: EnergyBackend | None = None, seed: int | None = 0):
        self.config = config
        self.backend = backend or SurrogateBackend()
        self.rng = np.random.default_rng(seed)
        self.state: State | None = None
        self.done = True
        self.bags_used = 0
        self._energy = 0.0
        self._e0 = None

    def reset(self, state: State | None = None) -> State:
        cfg = self.config
        if state is None:
            if cfg.kind == MULTI_BAG:
                bag = cfg.bags[int(self.rng.integers(len(cfg.bags)))]
            else:
                bag = cfg.bags[0]
            state = State(cfg.initial_canvas, bag)
        self.state = state
        self.done = state.terminal
        self.bags_used = 1
        self._energy = self.backend.evaluate(state.canvas)
        return state

    def _finish(self, state: State, reward: float, reason: str, info: dict) -> StepResult:
        self.state = state
        self.done = True
        info["reason"] = reason
        return StepResult(state, reward, True, info)

    def step(self, action: Action) -> StepResult:
        if self.done or self.state is None:
            raise EpisodeFinished("step() called on a finished episode; call reset()")
        cfg = self.config
        state = self.state
        canvas = state.canvas
        if action.element not in state.bag:
            raise ElementNotInBag(f"element Z={action.element} not in bag {state.bag.formula}")
        n = len(canvas)
        if n > 0 and not 0 <= action.focal < n:
            raise InvalidFocal(f"focal index {action.focal} outside canvas of {n} atoms")
        info = {"reason": None, "delta_e": math.nan, "penalty": 0.0, "position": None}
        floor = cfg.reward_floor
        try:
            x = resolve_position(canvas, action, cfg.d_min, cfg.d_max)
        except DegenerateFrame:
            return self._finish(state, floor, "degenerate_frame", info)
        info["position"] = x
        next_state = transition(state, action, x)
        if n > 0:
            nearest = float(np.sqrt(((canvas.positions - x) ** 2).sum(axis=1)).min())
            if nearest < cfg.min_dist:
                return self._finish(next_state, floor, "too_close", info)
            if nearest > cfg.max_dist:
                return self._finish(next_state, floor, "too_far", info)
        try:
            e_next = self.backend.evaluate(next_state.canvas)
            e_atom = self.backend.atomic_energy(action.element)
        except (BackendError, MissingPairParams) as exc:
            info["error"] = str(exc)
            return self._finish(next_state, floor, "backend_error", info)
        delta_e = e_next - self._energy - e_atom
        reward = -delta_e
        info["delta_e"] = delta_e
        if cfg.kind == SOLVATION:
            penalty = cfg.rho * float(np.linalg.norm(x))
            info["penalty"] = penalty
            reward -= penalty
        self._energy = e_next
        if reward < floor:
            return self._finish(next_state, floor, "reward_floor", info)
        if next_state.bag.total == 0:
            if cfg.kind == SOLVATION and self.bags_used < cfg.n_bags:
                next_state = State(next_state.canvas, cfg.bags[0])
                self.bags_used += 1
                info["refilled"] = True
            else:
                return self._finish(next_state, reward, "complete", info)
        self.state = next_state
        return StepResult(next_state, reward, False, info)


def trajectory_from_canvas(target: Canvas, order: Sequence[int] | None = None) -> tuple[Canvas, list[Action]]:
    """Actions that rebuild ``target`` atom by atom from an empty canvas.

    The built canvas is a rigidly moved copy of ``target`` (first atom at the
    origin, second on +x, third in the +y half-plane), returned together with
    the actions that produce it in the given ``order``.
    """
    order = list(range(len(target))) if order is None else list(order)
    pos = target.positions[order]
    pos = pos - pos[0]
    rot = np.eye(3)
    if len(order) > 1:
        rot = _align_rotation(pos[1], pos[2] if len(order) > 2 else None)
    pos = pos @ rot.T
    built = Canvas([target.numbers[i] for i in order], pos)
    actions = [Action(0, built.numbers[0])]
    for k in range(1, len(order)):
        placed = Canvas(built.numbers[:k], pos[:k])
        dist = np.sqrt(((pos[:k] - pos[k]) ** 2).sum(axis=1))
        focal = int(np.argmin(dist))
        ic = internal_from_position(local_frame(placed, focal), pos[k])
        actions.append(Action(focal, built.numbers[k], ic.distance, ic.angle or 0.0,
                              ic.abs_dihedral or 0.0, ic.kappa or 1))
    return built, actions


def _align_rotation(second: np.ndarray, third: np.ndarray | None) -> np.ndarray:
    ex = second / np.linalg.norm(second)
    ref = third if third is not None else np.array([0.0, 1.0, 0.0])
    ey = ref - (ref @ ex) * ex
    if np.linalg.norm(ey) < 1e-9:
        ref = np.array([0.0, 1.0, 0.0]) if abs(ex[1]) < 0.9 else np.array([0.0, 0.0, 1.0])
        ey = ref - (ref @ ex) * ex
    ey /= np.linalg.norm(ey)
    return np.vstack([ex, ey, np.cross(ex, ey)])


# Named task presets. Bags follow the QM9 formulas of the original tasks.
PRESETS = {
    "single_bag_small": dict(kind=SINGLE_BAG, formulas=("C2H2O2", "CH3NO", "CH4O"),
                             d_range=(0.95, 1.80), horizon=192, minibatch=24),
    "multi_bag_qm9_5": dict(kind=MULTI_BAG,
                            formulas=("H2O", "CHN", "C2N2", "H3N", "C2H2", "CH2O",
                                      "C2HNO", "N4O", "C3HN", "CH4", "CF4"),
                            d_range=(0.95, 1.80), horizon=384, minibatch=48),
    "single_bag_large": dict(kind=SINGLE_BAG, formulas=("C3H5NO3", "C4H7N", "C3H8O"),
                             d_range=(0.95, 1.80), horizon=256, minibatch=32),
    "solvation_formaldehyde": dict(kind=SOLVATION, formulas=("H2O",), solute="formaldehyde.xyz",
                                   n_bags=5, rho=0.01, d_range=(0.90, 2.80), horizon=384,
                                   minibatch=48),
}


def load_solute(name: str) -> Canvas:
    text = resources.files("molbuild.data").joinpath(name).read_text()
    canvas, _ = parse_xyz(text)
    return canvas


def preset_bags(name: str) -> list[Bag]:
    try:
        entry = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return [bag_from_formula(f) for f in entry["formulas"]]


def task_from_preset(name: str, bag: str | None = None, **overrides) -> TaskConfig:
    """TaskConfig for a named preset; single-bag presets need ``bag`` (default: first)."""
    bags = preset_bags(name)
    entry = PRESETS[name]
    kw = dict(kind=entry["kind"], d_min=entry["d_range"][0], d_max=entry["d_range"][1])
    if entry["kind"] == SINGLE_BAG:
        kw["bags"] = (bag_from_formula(bag) if bag else bags[0],)
    else:
        kw["bags"] = tuple(bags)
    if entry["kind"] == SOLVATION:
        kw.update(initial_canvas=load_solute(entry["solute"]), n_bags=entry["n_bags"], rho=entry["rho"])
    kw.update(overrides)
    return TaskConfig(**kw)


def preset_ppo_overrides(name: str) -> dict:
    entry = PRESETS[name]
    return {"horizon": entry["horizon"], "minibatch_size": entry["minibatch"]}
