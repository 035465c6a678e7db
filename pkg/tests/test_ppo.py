import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from molbuild.env import TaskConfig
from molbuild.errors import ConfigError, LengthMismatch, NonFiniteLoss, WorkerFailure
from molbuild.nn import autodiff as ad
from molbuild.nn.layers import Adam
from molbuild.nn.schnet import SchNetConfig
from molbuild.policy import ActorCritic, PolicyConfig
from molbuild.ppo import (CSV_HEADER, PpoConfig, RolloutWorkers, collect_rollouts, compute_gae,
                          normalize_advantages, ppo_loss, ppo_update, steps_to_threshold, task_ppo_config,
                          train)

from gradcheck import gradcheck_params, relative_error

TINY = PolicyConfig(schnet=SchNetConfig(n_interactions=1, n_filters=6, n_atom_basis=5, n_rbf=4))
H2O = TaskConfig(bags=("H2O",))


def gae_oracle(rewards, values, dones, gamma, lam, last):
    """Sum of discounted TD errors up to the end of each episode."""
    n = len(rewards)
    nxt = list(values[1:]) + [last]
    delta = [rewards[t] + gamma * nxt[t] * (not dones[t]) - values[t] for t in range(n)]
    adv = []
    for t in range(n):
        total, scale = 0.0, 1.0
        for k in range(t, n):
            total += scale * delta[k]
            if dones[k]:
                break
            scale *= gamma * lam
        adv.append(total)
    return np.array(adv)


class TestGae:
    def test_hand_example(self):
        adv, tgt = compute_gae([1, 1, 1], [0, 0, 0], [False, False, True], 1.0, 1.0)
        np.testing.assert_allclose(adv, [3, 2, 1])
        np.testing.assert_allclose(tgt, [3, 2, 1])

    def test_bootstrap_and_reset(self):
        adv, _ = compute_gae([0, 1, 0], [0.5, 0.0, 0.0], [True, False, False], 0.9, 0.5, last_value=2.0)
        # first step ends an episode: no look-ahead
        assert adv[0] == -0.5
        assert abs(adv[2] - 0.9 * 2.0) < 1e-15
        assert abs(adv[1] - (1.0 + 0.45 * 1.8)) < 1e-15

    @given(st.integers(0, 10**6))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        r, v = rng.standard_normal(n), rng.standard_normal(n)
        d = rng.random(n) < 0.3
        gamma, lam, last = rng.uniform(0.5, 1), rng.uniform(0, 1), rng.standard_normal()
        adv, tgt = compute_gae(r, v, d, gamma, lam, last)
        np.testing.assert_allclose(adv, gae_oracle(r, v, d, gamma, lam, last), atol=1e-12)
        np.testing.assert_allclose(tgt, adv + v)

    def test_lambda_zero_is_td_error(self):
        adv, _ = compute_gae([1.0, 2.0], [0.5, 0.25], [False, True], 0.9, 0.0)
        np.testing.assert_allclose(adv, [1.0 + 0.9 * 0.25 - 0.5, 2.0 - 0.25])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            compute_gae([1, 2], [0], [False, True], 0.9, 0.9)

    def test_normalize(self):
        a = normalize_advantages(np.array([1.0, 2.0, 3.0]))
        assert abs(a.mean()) < 1e-15 and abs(a.std() - 1) < 1e-12
        assert np.all(normalize_advantages(np.ones(3)) == 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        PpoConfig(horizon=100, workers=16)
    with pytest.raises(ConfigError):
        PpoConfig(clip=0.0)
    assert task_ppo_config(TaskConfig(kind="solvation", initial_canvas=H2O.initial_canvas,
                                      bags=("H2O",))).horizon == 384
    assert task_ppo_config(H2O).minibatch_size == 24


def rollout_batch(policy_cfg=TINY, workers=4, steps=6, seed=0):
    policy = ActorCritic(policy_cfg, seed=1)
    buf = collect_rollouts(policy, RolloutWorkers(H2O, workers, seed), steps)
    buf.finish(0.99, 0.95)
    return policy, buf


class TestLoss:
    def test_full_loss_gradients(self):
        for use_kappa in (True, False):
            policy, buf = rollout_batch(replace(TINY, use_kappa=use_kappa))
            tr = buf.transitions
            rng = np.random.default_rng(0)
            for t in tr:  # spread ratios across both sides of the clip range
                t.sample.log_prob += rng.uniform(-0.4, 0.4)
            adv = normalize_advantages(buf.advantages)
            cfg = PpoConfig(entropy_coef=0.3)
            err = gradcheck_params(lambda: ppo_loss(policy, tr, adv, buf.targets, cfg)[0],
                                   policy.parameters(), coords=100)
            assert err <= 1e-5

    def test_clipped_side_has_no_policy_gradient(self):
        policy, buf = rollout_batch()
        tr = buf.transitions
        for t in tr:
            t.sample.log_prob -= 0.5  # ratio = e^0.5 > 1.2
        cfg = PpoConfig(value_coef=0.0, entropy_coef=0.0)
        loss, stats = ppo_loss(policy, tr, np.ones(len(tr)), buf.targets, cfg)
        policy.zero_grad()
        ad.backward(loss)
        assert stats["clip_fraction"] == 1.0
        assert all(p.grad is None or not p.grad.any() for p in policy.parameters())

    def test_unclipped_is_vanilla_policy_gradient(self):
        policy, buf = rollout_batch()
        tr = buf.transitions
        adv = np.random.default_rng(2).standard_normal(len(tr))
        cfg = PpoConfig(value_coef=0.0, entropy_coef=0.0)
        loss, stats = ppo_loss(policy, tr, adv, buf.targets, cfg)
        assert abs(stats["approx_kl"]) < 1e-9 and stats["clip_fraction"] == 0.0
        policy.zero_grad()
        ad.backward(loss)
        ppo_grad = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in policy.parameters()]
        logp, _, _ = policy.evaluate([t.state for t in tr], [t.sample for t in tr])
        policy.zero_grad()
        ad.backward(-ad.mean(logp * adv))
        for g, p in zip(ppo_grad, policy.parameters()):
            assert relative_error(g, np.zeros(p.shape) if p.grad is None else p.grad) < 1e-10

    def test_loss_terms(self):
        policy, buf = rollout_batch()
        tr = buf.transitions
        adv = normalize_advantages(buf.advantages)
        loss, s = ppo_loss(policy, tr, adv, buf.targets, PpoConfig(entropy_coef=0.0))
        assert abs(loss.item() - (s["policy_loss"] + s["value_loss"])) < 1e-12
        loss2, s2 = ppo_loss(policy, tr, adv, buf.targets, PpoConfig(entropy_coef=0.5, value_coef=2.0))
        assert abs(loss2.item() - (s2["policy_loss"] + 2 * s2["value_loss"] - 0.5 * s2["entropy"])) < 1e-12

    def test_non_finite(self):
        policy, buf = rollout_batch()
        buf.advantages[3] = np.nan
        with pytest.raises(NonFiniteLoss) as info:
            ppo_update(policy, Adam(policy.parameters()), buf, PpoConfig(epochs=1, minibatch_size=4),
                       np.random.default_rng(0))
        assert info.value.minibatch is not None

    def test_update_moves_parameters_by_at_most_lr_per_step(self):
        policy, buf = rollout_batch()
        before = [p.data.copy() for p in policy.parameters()]
        cfg = PpoConfig(epochs=1, minibatch_size=len(buf), learning_rate=1e-3)
        stats = ppo_update(policy, Adam(policy.parameters(), lr=1e-3), buf, cfg, np.random.default_rng(0))
        assert stats["grad_norm"] > 0
        moved = max(np.abs(p.data - b).max() for p, b in zip(policy.parameters(), before))
        assert 0 < moved <= 1e-3 * (1 + 1e-6)


class TestRollouts:
    def test_shapes_and_bootstrap(self):
        _, buf = rollout_batch(workers=4, steps=5)
        assert len(buf) == 20 and len(buf.segments) == 4
        for seg, boot in zip(buf.segments, buf.bootstrap):
            if seg[-1].done:
                assert boot == 0.0

    def test_worker_streams_independent_of_worker_count(self):
        _, one = rollout_batch(workers=1, steps=6, seed=5)
        _, four = rollout_batch(workers=4, steps=6, seed=5)
        for a, b in zip(one.segments[0], four.segments[0]):
            assert a.reward == b.reward
            assert (a.sample.focal, a.sample.element, a.sample.distance) == \
                (b.sample.focal, b.sample.element, b.sample.distance)

    def test_worker_failure_names_worker(self, monkeypatch):
        policy = ActorCritic(TINY, seed=1)
        workers = RolloutWorkers(H2O, 3, 0)
        real = policy.act

        def bad_act(states, rngs, deterministic=False):
            out = real(states, rngs, deterministic)
            out[2].element = 9
            return out

        monkeypatch.setattr(policy, "act", bad_act)
        with pytest.raises(WorkerFailure) as info:
            collect_rollouts(policy, workers, 1)
        assert info.value.worker == 2


class TestTrain:
    def test_deterministic_and_files(self, tmp_path):
        cfg = PpoConfig(horizon=16, minibatch_size=8, workers=4, epochs=2)
        task = TaskConfig(bags=("H2",))
        a = train(task, cfg, 48, 16, seed=3, policy_config=replace(TINY), out_dir=tmp_path / "a")
        b = train(task, cfg, 48, 16, seed=3, policy_config=replace(TINY), out_dir=tmp_path / "b")
        text = (tmp_path / "a" / "metrics.csv").read_text()
        assert text == (tmp_path / "b" / "metrics.csv").read_text()
        rows = list(csv.reader(text.splitlines()))
        assert tuple(rows[0]) == CSV_HEADER
        assert [int(r[0]) for r in rows[1:]] == [0, 16, 32, 48]
        assert sorted(p.name for p in (tmp_path / "a").glob("checkpoint_*.npz")) == [
            f"checkpoint_{s:08d}.npz" for s in (0, 16, 32, 48)]
        assert [r["return"] for r in a.rows] == [r["return"] for r in b.rows]
        assert set(a.final_canvases) == {"H2"}

    def test_target_return_stops_early(self):
        cfg = PpoConfig(horizon=16, minibatch_size=8, workers=4, epochs=1)
        task = TaskConfig(bags=("H2",))
        full = train(task, cfg, 48, 16, seed=3, policy_config=replace(TINY))
        first = full.rows[0]["return"]
        early = train(task, cfg, 48, 16, seed=3, policy_config=replace(TINY), target_return=first)
        assert [r["step"] for r in early.rows] == [0]
        never = train(task, cfg, 48, 16, seed=3, policy_config=replace(TINY), target_return={"H2": 1e9})
        assert [r["return"] for r in never.rows] == [r["return"] for r in full.rows]

    def test_steps_to_threshold(self):
        rows = [{"step": 0, "bag": "H2", "return": 0.1}, {"step": 96, "bag": "H2", "return": 0.2}]
        assert steps_to_threshold(rows, 0.15) == 96
        assert steps_to_threshold(rows, 0.5) == math.inf
        assert steps_to_threshold(rows, 0.15, bag="H2O") == math.inf
