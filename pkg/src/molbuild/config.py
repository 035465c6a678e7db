"""Run configuration from INI files.

Sections and keys (all optional; unknown keys are errors)::

    [task]    preset, kind, bags (comma separated), n_bags, rho, reward_floor,
              min_dist, max_dist, d_min, d_max, e_max, solute (XYZ path)
    [ppo]     any PpoConfig field
    [policy]  use_kappa, sigma_distance, sigma_angle, sigma_dihedral, kappa_entropy
    [run]     seeds, steps, eval_every, eval_episodes, out, backend, backend_cmd, checkpoints
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from molbuild.env import TaskConfig, load_solute, preset_ppo_overrides, task_from_preset
from molbuild.errors import ConfigError
from molbuild.policy import PolicyConfig
from molbuild.ppo import PpoConfig, task_ppo_config
from molbuild.xyz import read_xyz

_TASK_KEYS = {"preset", "kind", "bags", "bag", "n_bags", "rho", "reward_floor", "min_dist", "max_dist",
              "d_min", "d_max", "e_max", "solute"}
_POLICY_KEYS = {"use_kappa", "sigma_distance", "sigma_angle", "sigma_dihedral", "kappa_entropy"}
_RUN_KEYS = {"seeds", "steps", "eval_every", "eval_episodes", "out", "backend", "backend_cmd", "checkpoints"}


def parse_seeds(text: str) -> list[int]:
    """'0..9' (inclusive), '3' or '0,2,5'."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}; use e.g. 0..9 or 0,1,2") from None
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    try:
        return type(like)(value)
    except ValueError:
        raise ConfigError(f"expected {type(like).__name__}, got {value!r}") from None


@dataclass
class RunConfig:
    task: TaskConfig
    ppo: PpoConfig
    policy: PolicyConfig
    seeds: list = field(default_factory=lambda: [0])
    steps: int = 20000
    eval_every: int = 960
    eval_episodes: int = 1
    out: str = "runs"
    backend: str = "surrogate"
    backend_cmd: str | None = None
    checkpoints: str = "all"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.steps < 0 or self.eval_every <= 0:
            raise ConfigError("need steps >= 0 and eval_every > 0")
        if self.backend not in ("surrogate", "external"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.checkpoints not in ("all", "last", "none"):
            raise ConfigError("checkpoints must be all, last or none")


def build_task(values: dict) -> tuple[TaskConfig, dict]:
    """TaskConfig from flat key/values; also returns preset PPO overrides."""
    values = dict(values)
    unknown = set(values) - _TASK_KEYS
    if unknown:
        raise ConfigError(f"unknown task keys: {sorted(unknown)}")
    bags = values.pop("bags", None) or values.pop("bag", None)
    if isinstance(bags, str):
        bags = [b.strip() for b in bags.split(",") if b.strip()]
    solute = values.pop("solute", None)
    preset = values.pop("preset", None)
    fields = {f.name: f for f in dataclasses.fields(TaskConfig)}
    kw = {}
    for key, raw in values.items():
        kw[key] = _coerce(raw, fields[key].default) if isinstance(raw, str) and key != "kind" else raw
    if solute:
        kw["initial_canvas"] = read_xyz(solute) if os.path.exists(solute) else load_solute(solute)
    if preset:
        if bags and len(bags) > 1:
            kw["bags"] = tuple(bags)
            return task_from_preset(preset, **kw), preset_ppo_overrides(preset)
        return task_from_preset(preset, bags[0] if bags else None, **kw), preset_ppo_overrides(preset)
    if bags:
        kw["bags"] = tuple(bags)
    return TaskConfig(**kw), {}


def build_ppo(task: TaskConfig, values: dict, preset_overrides: dict | None = None) -> PpoConfig:
    fields = {f.name: f for f in dataclasses.fields(PpoConfig)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"unknown ppo keys: {sorted(unknown)}")
    kw = dict(preset_overrides or {})
    for key, raw in values.items():
        kw[key] = _coerce(raw, fields[key].default) if isinstance(raw, str) else raw
    return task_ppo_config(task, **kw)


def build_policy(task: TaskConfig, values: dict) -> PolicyConfig:
    unknown = set(values) - _POLICY_KEYS
    if unknown:
        raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
    fields = {f.name: f for f in dataclasses.fields(PolicyConfig)}
    kw = {k: _coerce(v, fields[k].default) if isinstance(v, str) else v for k, v in values.items()}
    return PolicyConfig(e_max=task.e_max, d_min=task.d_min, d_max=task.d_max, **kw)


def read_config(path) -> dict[str, dict]:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    sections = {name: dict(parser[name]) for name in parser.sections()}
    unknown = set(sections) - {"task", "ppo", "policy", "run"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if set(sections.get("run", {})) - _RUN_KEYS:
        raise ConfigError(f"unknown run keys: {sorted(set(sections['run']) - _RUN_KEYS)}")
    return sections


def build_run(sections: dict[str, dict]) -> RunConfig:
    task, preset_ppo = build_task(sections.get("task", {}))
    ppo = build_ppo(task, sections.get("ppo", {}), preset_ppo)
    policy = build_policy(task, sections.get("policy", {}))
    run = dict(sections.get("run", {}))
    kw = {}
    if "seeds" in run:
        kw["seeds"] = parse_seeds(run.pop("seeds"))
    for key in ("steps", "eval_every", "eval_episodes"):
        if key in run:
            kw[key] = _coerce(run.pop(key), 0)
    kw.update(run)
    return RunConfig(task, ppo, policy, **kw)
