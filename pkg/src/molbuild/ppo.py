"""Clipped-surrogate PPO with GAE for the atom-placement tasks.

Rollouts are synchronous: all workers act in lockstep through one batched
policy call per tick, each with its own environment and random stream, so
results do not depend on thread scheduling.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from molbuild.chem import State
from molbuild.energy import EnergyBackend
from molbuild.env import MULTI_BAG, SOLVATION, MolEnv, TaskConfig
from molbuild.errors import ConfigError, LengthMismatch, MolBuildError, NonFiniteLoss, WorkerFailure
from molbuild.nn import autodiff as ad
from molbuild.nn.checkpoint import save_checkpoint
from molbuild.nn.layers import Adam, clip_grad_norm
from molbuild.policy import ActionSample, ActorCritic, PolicyConfig

CSV_HEADER = ("step", "seed", "bag", "return", "policy_loss", "value_loss", "entropy", "clip_fraction")


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    grad_clip: float = 0.5
    gae_lambda: float = 0.95
    value_coef: float = 1.0
    entropy_coef: float = 0.01
    epochs: int = 5
    learning_rate: float = 3e-4
    discount: float = 0.99
    horizon: int = 192
    minibatch_size: int = 24
    workers: int = 16
    advantage_eps: float = 1e-8

    def __post_init__(self):
        if not self.clip > 0:
            raise ConfigError("clip must be positive")
        if not (0 <= self.gae_lambda <= 1 and 0 <= self.discount <= 1):
            raise ConfigError("gae_lambda and discount must lie in [0, 1]")
        if self.epochs < 1 or self.minibatch_size < 1 or self.workers < 1:
            raise ConfigError("epochs, minibatch_size and workers must be >= 1")
        if self.horizon < self.workers or self.horizon % self.workers:
            raise ConfigError(f"horizon {self.horizon} must be a positive multiple of workers {self.workers}")


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0):
    """Generalized advantage estimates and value targets for one segment.

    ``last_value`` bootstraps the step after the segment when it does not end
    an episode. Advantages are returned unnormalized; targets = advantages +
    values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not len(rewards) == len(values) == len(dones):
        raise LengthMismatch(f"rewards {len(rewards)}, values {len(values)}, dones {len(dones)}")
    adv = np.zeros(len(rewards))
    running = 0.0
    next_value = last_value
    for t in range(len(rewards) - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), eps)


@dataclass
class Transition:
    state: State
    sample: ActionSample
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass
class TrajectoryBuffer:
    """Rollout segments, one per worker, in worker order."""

    segments: list = field(default_factory=list)   # list[list[Transition]]
    bootstrap: list = field(default_factory=list)  # value after each segment (0 if it ended an episode)
    advantages: np.ndarray | None = None
    targets: np.ndarray | None = None

    @property
    def transitions(self) -> list[Transition]:
        return [t for seg in self.segments for t in seg]

    def __len__(self) -> int:
        return sum(len(seg) for seg in self.segments)

    def finish(self, gamma: float, lam: float) -> None:
        adv, tgt = [], []
        for seg, last in zip(self.segments, self.bootstrap):
            a, g = compute_gae([t.reward for t in seg], [t.sample.value for t in seg],
                               [t.done for t in seg], gamma, lam, last)
            adv.append(a)
            tgt.append(g)
        self.advantages = np.concatenate(adv) if adv else np.zeros(0)
        self.targets = np.concatenate(tgt) if tgt else np.zeros(0)


class RolloutWorkers:
    """Environments, random streams and in-progress episodes of all workers."""

    def __init__(self, task: TaskConfig, workers: int, seed: int, backend: EnergyBackend | None = None):
        streams = np.random.SeedSequence(seed).spawn(workers)
        self.envs, self.rngs = [], []
        for ss in streams:
            env_ss, pol_ss = ss.spawn(2)
            self.envs.append(MolEnv(task, backend, seed=np.random.default_rng(env_ss)))
            self.rngs.append(np.random.default_rng(pol_ss))
        self.states = [env.reset() for env in self.envs]
        self.episode_returns = [0.0] * workers
        self.finished: list[float] = []  # returns of completed training episodes

    def __len__(self) -> int:
        return len(self.envs)


def collect_rollouts(policy: ActorCritic, workers: RolloutWorkers, steps_per_worker: int) -> TrajectoryBuffer:
    segments = [[] for _ in range(len(workers))]
    for _ in range(steps_per_worker):
        samples = policy.act(workers.states, workers.rngs)
        for w, (env, sample) in enumerate(zip(workers.envs, samples)):
            state = workers.states[w]
            try:
                result = env.step(sample.to_action())
            except MolBuildError as exc:
                raise WorkerFailure(str(exc), w) from exc
            segments[w].append(Transition(state, sample, result.reward, result.done, result.info))
            workers.episode_returns[w] += result.reward
            if result.done:
                workers.finished.append(workers.episode_returns[w])
                workers.episode_returns[w] = 0.0
                workers.states[w] = env.reset()
            else:
                workers.states[w] = result.next_state
    live = [w for w in range(len(workers)) if not segments[w][-1].done]
    bootstrap = [0.0] * len(workers)
    if live:
        values = policy.critic_values([workers.states[w] for w in live])
        for w, v in zip(live, values):
            bootstrap[w] = float(v)
    return TrajectoryBuffer(segments, bootstrap)


def ppo_loss(policy: ActorCritic, transitions, advantages, targets, config: PpoConfig):
    """Scalar loss to minimize plus diagnostics for one minibatch."""
    states = [t.state for t in transitions]
    samples = [t.sample for t in transitions]
    old_logp = np.array([s.log_prob for s in samples])
    logp, entropy, value = policy.evaluate(states, samples)
    ratio = ad.exp(logp - old_logp)
    adv = np.asarray(advantages, dtype=np.float64)
    surrogate = ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv)
    policy_loss = -ad.mean(surrogate)
    value_loss = ad.mean(ad.square(value - np.asarray(targets, dtype=np.float64)))
    mean_entropy = ad.mean(entropy)
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * mean_entropy
    r = ratio.data
    stats = {"policy_loss": float(policy_loss.data), "value_loss": float(value_loss.data),
             "entropy": float(mean_entropy.data),
             "clip_fraction": float(np.mean(np.abs(r - 1.0) > config.clip)),
             "approx_kl": float(np.mean(old_logp - logp.data))}
    return loss, stats


def ppo_update(policy: ActorCritic, optimizer: Adam, buffer: TrajectoryBuffer, config: PpoConfig,
               rng: np.random.Generator) -> dict:
    """Several epochs of minibatch Adam steps on the clipped objective."""
    if buffer.advantages is None:
        buffer.finish(config.discount, config.gae_lambda)
    transitions = buffer.transitions
    adv = normalize_advantages(buffer.advantages, config.advantage_eps)
    targets = buffer.targets
    params = optimizer.params
    totals: dict[str, float] = {}
    count = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(transitions))
        for start in range(0, len(order), config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            loss, stats = ppo_loss(policy, [transitions[i] for i in idx], adv[idx], targets[idx], config)
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(f"non-finite loss in minibatch {count}", minibatch=count)
            policy.zero_grad()
            ad.backward(loss)
            stats["grad_norm"] = clip_grad_norm(params, config.grad_clip)
            optimizer.step()
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in totals.items()}


# ---------------------------------------------------------------- evaluation and training loop

def evaluate_policy(policy: ActorCritic, task: TaskConfig, backend: EnergyBackend | None = None,
                    episodes: int = 1, deterministic: bool = True, seed: int = 0):
    """Average undiscounted return per bag; returns {formula: (mean_return, final_canvases)}."""
    rng = np.random.default_rng(seed)
    results = {}
    for bag in task.bags:
        env = MolEnv(task, backend, seed=rng)
        returns, finals = [], []
        for _ in range(episodes):
            state = env.reset(State(task.initial_canvas, bag))
            total, done = 0.0, state.terminal
            while not done:
                sample = policy.act_one(state, None if deterministic else rng, deterministic)
                step = env.step(sample.to_action())
                total += step.reward
                state, done = step.next_state, step.done
            returns.append(total)
            finals.append(state.canvas)
        results[bag.formula] = (float(np.mean(returns)), finals)
    return results


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


@dataclass
class TrainResult:
    policy: ActorCritic
    rows: list
    final_canvases: dict


def train(task: TaskConfig, config: PpoConfig, total_steps: int, eval_every: int, seed: int = 0,
          policy_config: PolicyConfig | None = None, backend: EnergyBackend | None = None,
          out_dir: str | None = None, metrics_name: str = "metrics.csv", checkpoints: str = "all",
          eval_episodes: int = 1, meta: dict | None = None,
          target_return: float | dict | None = None) -> TrainResult:
    """Alternate rollouts and PPO updates, evaluating deterministically every ``eval_every`` steps.

    Runs ``total_steps // horizon`` updates. With ``out_dir`` set, writes the
    metrics CSV and checkpoints (``checkpoints``: "all" per evaluation,
    "last", or "none"). ``target_return`` (one value, or one per formula)
    stops training after the first evaluation where every bag reaches it.
    """
    if checkpoints not in ("all", "last", "none"):
        raise ConfigError("checkpoints must be 'all', 'last' or 'none'")
    if eval_every <= 0:
        raise ConfigError("eval_every must be positive")
    policy_config = policy_config or PolicyConfig(e_max=task.e_max, d_min=task.d_min, d_max=task.d_max)
    seeds = np.random.SeedSequence(seed).spawn(3)
    policy = ActorCritic(policy_config, seed=np.random.default_rng(seeds[0]))
    optimizer = Adam(policy.parameters(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(seeds[1])
    workers = RolloutWorkers(task, config.workers, int(seeds[2].generate_state(1)[0]), backend)
    rows: list[dict] = []
    final_canvases: dict = {}
    last_stats = {k: math.nan for k in CSV_HEADER[4:]}
    writer = fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, metrics_name), "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
    meta = {**(meta or {}), "task": task.kind, "bags": [b.formula for b in task.bags], "seed": seed,
            "ppo": asdict(config), "policy": asdict(policy_config)}

    def reached(results) -> bool:
        if target_return is None:
            return False
        for formula, (ret, _) in results.items():
            goal = target_return[formula] if isinstance(target_return, dict) else target_return
            if ret < goal:
                return False
        return True

    def run_eval(step: int) -> bool:
        nonlocal final_canvases
        results = evaluate_policy(policy, task, backend, eval_episodes)
        for formula, (ret, finals) in results.items():
            row = {"step": step, "seed": seed, "bag": formula, "return": ret, **last_stats}
            rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in CSV_HEADER])
            final_canvases[formula] = finals[-1]
        if fh is not None:
            fh.flush()
        if out_dir is not None and checkpoints != "none":
            name = f"checkpoint_{step:08d}.npz" if checkpoints == "all" else "checkpoint.npz"
            save_checkpoint(policy, os.path.join(out_dir, name), {**meta, "step": step})
        return reached(results)

    try:
        done = run_eval(0)
        next_eval = eval_every
        steps = 0
        for _ in range(total_steps // config.horizon):
            if done:
                break
            buffer = collect_rollouts(policy, workers, config.horizon // config.workers)
            buffer.finish(config.discount, config.gae_lambda)
            stats = ppo_update(policy, optimizer, buffer, config, shuffle_rng)
            last_stats = {k: stats[k] for k in CSV_HEADER[4:]}
            steps += config.horizon
            if steps >= next_eval:
                done = run_eval(steps)
                while next_eval <= steps:
                    next_eval += eval_every
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(policy, rows, final_canvases)


def steps_to_threshold(rows, threshold: float, bag: str | None = None) -> float:
    """First logged step whose evaluation return reaches ``threshold`` (inf if never)."""
    for row in rows:
        if (bag is None or row["bag"] == bag) and row["return"] >= threshold:
            return row["step"]
    return math.inf


def task_ppo_config(task: TaskConfig, **overrides) -> PpoConfig:
    """Default PPO settings for a task kind (multi-bag and solvation use longer horizons)."""
    base = PpoConfig(horizon=384, minibatch_size=48) if task.kind in (MULTI_BAG, SOLVATION) else PpoConfig()
    return replace(base, **overrides)
