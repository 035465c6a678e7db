import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from molbuild.chem import Action, Canvas, State, bag_from_formula
from molbuild.energy import SurrogateBackend, surrogate_energy
from molbuild.env import (MULTI_BAG, SOLVATION, MolEnv, TaskConfig, load_solute, resolve_position, task_from_preset,
                          trajectory_from_canvas, valid_action_masks)
from molbuild.errors import ConfigError, ElementNotInBag, EpisodeFinished, InvalidFocal
from molbuild.geometry import kabsch_rmsd

from conftest import random_canvas


def open_task(bag, **kw):
    """No guards: huge floor, wide distance window."""
    kw = dict(dict(reward_floor=-1e9, min_dist=1e-6, max_dist=1e6, d_min=1e-3, d_max=1e3), **kw)
    return TaskConfig(bags=(bag,), **kw)


def rollout(env, actions):
    env.reset()
    rewards = []
    for a in actions:
        r = env.step(a)
        rewards.append(r.reward)
    return rewards, r


class TestSingleBag:
    def test_dimer_reward(self):
        env = MolEnv(TaskConfig(bags=("H2",)))
        env.reset()
        r0 = env.step(Action(0, "H"))
        assert r0.reward == 0.0 and not r0.done
        r1 = env.step(Action(0, "H", 1.0))
        assert r1.done and r1.info["reason"] == "complete"
        assert abs(r1.reward - 0.174) < 1e-12

    def test_first_atom_at_origin(self):
        env = MolEnv(TaskConfig(bags=("H2O",)))
        env.reset()
        assert np.array_equal(env.step(Action(0, "O")).next_state.canvas.positions[0], np.zeros(3))

    def test_too_close(self):
        env = MolEnv(TaskConfig(bags=("H2O",), d_min=0.1))
        env.reset()
        env.step(Action(0, "O"))
        r = env.step(Action(0, "H", 0.5))
        assert r.done and r.info["reason"] == "too_close" and r.reward == -0.6

    def test_too_far_from_all_atoms(self):
        env = MolEnv(TaskConfig(bags=("H2",), d_max=3.0))
        env.reset()
        env.step(Action(0, "H"))
        r = env.step(Action(0, "H", 2.5))
        assert r.done and r.info["reason"] == "too_far" and r.reward == -0.6

    def test_far_from_focal_but_near_another_atom(self):
        cfg = TaskConfig(bags=("H",), d_max=3.0)
        start = State(Canvas([1, 1], [[0, 0, 0], [1.0, 0, 0]]), bag_from_formula("H"))
        hits = 0
        for alpha in np.linspace(0.05, 3.0, 60):
            action = Action(1, "H", 2.2, float(alpha))
            x = resolve_position(start.canvas, action, cfg.d_min, cfg.d_max)
            nearest = np.linalg.norm(start.canvas.positions - x, axis=1).min()
            env = MolEnv(cfg)
            env.reset(start)
            reason = env.step(action).info["reason"]
            assert (reason == "too_far") == (nearest > 2.0)
            hits += nearest <= 2.0
        assert hits > 0

    def test_reward_floor(self):
        env = MolEnv(TaskConfig(bags=("H2",), min_dist=0.1, d_min=0.2))
        env.reset()
        env.step(Action(0, "H"))
        r = env.step(Action(0, "H", 0.3))
        assert r.done and r.info["reason"] == "reward_floor" and r.reward == -0.6

    def test_errors(self):
        env = MolEnv(TaskConfig(bags=("H2",)))
        with pytest.raises(EpisodeFinished):
            env.step(Action(0, "H"))
        env.reset()
        with pytest.raises(ElementNotInBag):
            env.step(Action(0, "O"))
        env.step(Action(0, "H"))
        with pytest.raises(InvalidFocal):
            env.step(Action(2, "H", 1.0))
        env.step(Action(0, "H", 1.0))
        with pytest.raises(EpisodeFinished):
            env.step(Action(0, "H", 1.0))

    def test_distance_clamped_to_hard_limits(self):
        env = MolEnv(open_task("H2", d_min=1.0, d_max=1.5))
        env.reset()
        env.step(Action(0, "H"))
        r = env.step(Action(0, "H", 100.0))
        assert abs(np.linalg.norm(r.next_state.canvas.positions[1]) - 6.0) < 1e-12

    def test_masks(self):
        state = State(Canvas([8], [[0, 0, 0]]), bag_from_formula("H2"))
        focal, element = valid_action_masks(state, 10)
        assert focal.tolist() == [True]
        assert np.flatnonzero(element).tolist() == [0]


class TestPathIndependence:
    @given(st.integers(0, 10**6))
    def test_return_is_total_energy_change(self, seed):
        rng = np.random.default_rng(seed)
        target = random_canvas(rng, int(rng.integers(2, 9)))
        bag = bag_from_formula("".join(target.symbols))
        totals = []
        for _ in range(3):
            order = rng.permutation(len(target))
            built, actions = trajectory_from_canvas(target, order)
            rewards, last = rollout(MolEnv(open_task(bag)), actions)
            assert last.info["reason"] == "complete"
            assert kabsch_rmsd(built, last.next_state.canvas) < 1e-9
            totals.append(sum(rewards))
        expected = -surrogate_energy(target)
        assert max(abs(t - expected) for t in totals) < 1e-9


class TestSolvation:
    def task(self, n=2, rho=0.01):
        return TaskConfig(kind=SOLVATION, initial_canvas=Canvas([8], [[5.0, 5, 5]]),
                          n_bags=n, rho=rho, d_min=0.9, d_max=2.8)

    @staticmethod
    def clear_action(state, cfg, rng):
        """An action landing 1.0-1.9 A from its nearest atom."""
        while True:
            n = len(state.canvas)
            action = Action(int(rng.integers(n)), state.bag.numbers[0], 1.1,
                            rng.uniform(0.5, 3.0), rng.uniform(0, math.pi), int(rng.choice([-1, 1])))
            x = resolve_position(state.canvas, action, cfg.d_min, cfg.d_max)
            if 1.0 < np.linalg.norm(state.canvas.positions - x, axis=1).min() < 1.9:
                return action

    def test_centres_solute(self):
        assert np.array_equal(self.task().initial_canvas.positions, np.zeros((1, 3)))

    def test_refill_and_penalty(self):
        cfg = self.task()
        env = MolEnv(cfg)
        state = env.reset()
        assert cfg.max_episode_length == 6
        prev_canvas = state.canvas
        refills, steps = 0, 0
        rng = np.random.default_rng(0)
        while True:
            r = env.step(self.clear_action(state, cfg, rng))
            steps += 1
            x = r.info["position"]
            assert r.info["penalty"] == 0.01 * math.sqrt(x @ x)
            if r.info["reason"] in (None, "complete"):
                de = surrogate_energy(r.next_state.canvas) - surrogate_energy(prev_canvas)
                assert abs(r.reward - (-de - r.info["penalty"])) < 1e-12
            refills += bool(r.info.get("refilled"))
            if r.done:
                break
            prev_canvas, state = r.next_state.canvas, r.next_state
        assert r.info["reason"] == "complete"
        assert refills == 1 and steps == 6

    def test_preset(self):
        cfg = task_from_preset("solvation_formaldehyde")
        assert cfg.n_bags == 5 and cfg.rho == 0.01 and len(cfg.initial_canvas) == 4
        assert load_solute("formaldehyde.xyz").symbols.count("H") == 2


class TestMultiBag:
    def test_samples_every_bag(self):
        cfg = task_from_preset("multi_bag_qm9_5")
        assert cfg.kind == MULTI_BAG and len(cfg.bags) == 11
        env = MolEnv(cfg, seed=0)
        seen = {env.reset().bag for _ in range(300)}
        assert seen == set(cfg.bags)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(bags=()),
        dict(bags=("H2", "H2O")),
        dict(bags=("H2",), kind="nope"),
        dict(bags=("H2",), reward_floor=0.1),
        dict(bags=("H2",), min_dist=3.0),
        dict(bags=("Cl2",)),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            TaskConfig(**kw)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            task_from_preset("nope")


def test_backend_shared_default():
    assert isinstance(MolEnv(TaskConfig(bags=("H2",))).backend, SurrogateBackend)
