"""Actor-critic over (canvas, bag) states.

All heads run batched: a list of states is embedded in one encoder pass, so
rollout workers can act in lockstep and PPO can score whole minibatches.

The action factorizes into a focal atom, an element, Gaussian internal
coordinates (distance, angle, |dihedral|) and a dihedral sign. The sign is
chosen by embedding both candidate next canvases and scoring the new atom's
row with a shared network. Which factors are active depends on how many atoms
the canvas holds (see :func:`active_components`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from molbuild.chem import DEFAULT_E_MAX, Action, State
from molbuild.env import clamp_internal, valid_action_masks
from molbuild.errors import ArityMismatch, NoValidElement
from molbuild.geometry import local_frame, position_from_internal
from molbuild.nn import autodiff as ad
from molbuild.nn.autodiff import Tensor
from molbuild.nn.layers import MLP, Module
from molbuild.nn.schnet import CanvasGraph, SchNet, SchNetConfig

BAG_FEATURES = 32
HIDDEN = 128
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PolicyConfig:
    e_max: int = DEFAULT_E_MAX
    d_min: float = 0.95
    d_max: float = 1.80
    use_kappa: bool = True
    sigma_distance: float = 0.15
    sigma_angle: float = 0.25
    sigma_dihedral: float = 0.25
    kappa_entropy: bool = False  # add the sign Bernoulli to the entropy bonus
    schnet: SchNetConfig = field(default_factory=SchNetConfig)

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        if min(self.sigma_distance, self.sigma_angle, self.sigma_dihedral) <= 0:
            raise ValueError("initial standard deviations must be positive")
        if self.schnet.e_max != self.e_max:
            object.__setattr__(self, "schnet", SchNetConfig(
                self.schnet.n_interactions, self.schnet.cutoff, self.schnet.n_filters,
                self.schnet.n_atom_basis, self.schnet.n_rbf, self.e_max))

    @property
    def embed_dim(self) -> int:
        return self.schnet.n_atom_basis + BAG_FEATURES


def active_components(n_atoms: int, use_kappa: bool = True) -> dict[str, bool]:
    """Which action factors contribute to the likelihood for a canvas of n atoms."""
    return {"focal": n_atoms >= 1, "element": True, "distance": n_atoms >= 1,
            "angle": n_atoms >= 2, "dihedral": n_atoms >= 3, "kappa": use_kappa and n_atoms >= 3}


@dataclass
class ActionSample:
    """A sampled action with everything needed to rescore it later.

    ``dihedral`` is the raw Gaussian draw: |psi| when the sign head is used,
    the signed psi otherwise (``signed`` true). ``candidates`` holds the two
    positions (kappa = +1, -1) the sign head compared, if it was used.
    """

    focal: int
    element: int
    distance: float
    angle: float
    dihedral: float
    kappa: int
    n_atoms: int
    signed: bool = False
    log_prob: float = 0.0
    entropy: float = 0.0
    value: float = 0.0
    p_plus: float = 0.5
    candidates: np.ndarray | None = None

    def to_action(self) -> Action:
        if self.signed:
            psi = min(max(self.dihedral, -math.pi), math.pi)
            return Action(self.focal, self.element, self.distance, self.angle, abs(psi),
                          1 if psi >= 0 else -1)
        return Action(self.focal, self.element, self.distance, self.angle, self.dihedral, self.kappa)


@dataclass
class StateEmbedding:
    per_atom: np.ndarray      # n_atoms x 96
    bag_embedding: np.ndarray  # 32


def _categorical(rng_u: float, probs: np.ndarray) -> int:
    """Inverse-CDF draw that can never return a zero-probability index."""
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, rng_u * cdf[-1], side="right"))
    if k >= len(probs) or probs[k] <= 0:
        k = int(np.flatnonzero(probs > 0)[-1])
    return k


def candidate_positions(state: State, focal: int, distance: float, angle: float, abs_dihedral: float,
                        d_min: float, d_max: float) -> np.ndarray:
    """The two placements (kappa = +1, -1) the environment would resolve."""
    probe = Action(focal, 1, distance, angle, abs_dihedral, 1)
    d, alpha, psi = clamp_internal(probe, d_min, d_max)
    frame = local_frame(state.canvas, focal)
    return np.stack([position_from_internal(frame, d, alpha, psi, 1),
                     position_from_internal(frame, d, alpha, psi, -1)])


class ActorCritic(Module):
    def __init__(self, config: PolicyConfig | None = None, seed: int | np.random.Generator = 0):
        config = config or PolicyConfig()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.config = config
        e, s = config.e_max, config.embed_dim
        self.schnet = SchNet(config.schnet, rng)
        self.bag_net = MLP((e, HIDDEN, BAG_FEATURES), rng)
        self.focal_net = MLP((s, HIDDEN, 1), rng)
        self.element_net = MLP((s, HIDDEN, e), rng)
        self.cont_net = MLP((s + e, HIDDEN, 3), rng, output="tanh")
        self.kappa_net = MLP((s, HIDDEN, 1), rng)
        self.value_net = MLP((s, HIDDEN, HIDDEN, 1), rng)
        self.log_std = Tensor(np.log([config.sigma_distance, config.sigma_angle, config.sigma_dihedral]),
                              requires_grad=True)
        lo_psi = -math.pi if not config.use_kappa else 0.0
        lo = np.array([config.d_min, 0.0, lo_psi])
        hi = np.array([config.d_max, math.pi, math.pi])
        self._center, self._half_range = 0.5 * (hi + lo), 0.5 * (hi - lo)

    # ------------------------------------------------------------ shared pieces

    def _graphs(self, canvases) -> list[CanvasGraph]:
        return [CanvasGraph.from_canvas(c, self.config.schnet) for c in canvases]

    def _bag_vectors(self, bags) -> np.ndarray:
        return np.stack([b.vector(self.config.e_max) for b in bags]).astype(np.float64)

    def _trunk(self, states):
        """Encoder pass shared by all heads."""
        batch = self.schnet.batch(self._graphs([s.canvas for s in states]))
        atoms = self.schnet(batch)
        bag = self.bag_net(Tensor(self._bag_vectors([s.bag for s in states])))
        per_atom = ad.concat([atoms, ad.take(bag, batch.mol)], axis=1)
        return batch, atoms, bag, per_atom

    def _means(self, focal_rows: Tensor, onehot: np.ndarray) -> Tensor:
        t = self.cont_net(ad.concat([focal_rows, Tensor(onehot)], axis=1))
        return t * self._half_range + self._center

    def _focal_rows(self, atoms, bag, batch, focal_index) -> Tensor:
        """[atom embedding of the focal atom, bag embedding]; zeros on an empty canvas."""
        padded = ad.concat([atoms, Tensor(np.zeros((1, atoms.shape[1])))], axis=0)
        return ad.concat([ad.take(padded, focal_index), bag], axis=1)

    def _sign_logits(self, states, elements, candidates) -> Tensor:
        """(K, 2) logits u_+, u_- for K states with their two candidate positions."""
        canvases = []
        for s, e, cand in zip(states, elements, candidates):
            canvases.append(s.canvas.append(e, cand[0]))
            canvases.append(s.canvas.append(e, cand[1]))
        batch = self.schnet.batch(self._graphs(canvases))
        atoms = self.schnet(batch)
        new_rows = ad.take(atoms, batch.offsets + batch.counts - 1)
        next_bags = [s.bag.remove(e) for s, e in zip(states, elements)]
        bag = self.bag_net(Tensor(self._bag_vectors(next_bags)))
        bag2 = ad.take(bag, np.repeat(np.arange(len(states)), 2))
        u = self.kappa_net(ad.concat([new_rows, bag2], axis=1))
        return u.reshape((len(states), 2))

    def _value(self, atoms, bag, batch) -> Tensor:
        pooled = ad.segment_sum(atoms, batch.mol, batch.n_mols)
        return self.value_net(ad.concat([pooled, bag], axis=1)).reshape((batch.n_mols,))

    def _element_masks(self, states) -> np.ndarray:
        masks = np.stack([valid_action_masks(s, self.config.e_max)[1] for s in states])
        empty = ~masks.any(axis=1)
        if empty.any():
            raise NoValidElement(f"no element left in the bag of state {int(np.flatnonzero(empty)[0])}")
        return masks

    # ------------------------------------------------------------ acting

    def act(self, states, rngs=None, deterministic: bool = False) -> list[ActionSample]:
        """Sample (or pick the mode of) one action per state, without recording gradients.

        ``rngs`` is one Generator per state; each is consumed in a fixed order
        (two uniforms, three normals, one uniform) regardless of the batch.
        """
        states = list(states)
        if not deterministic and (rngs is None or len(rngs) != len(states)):
            raise ValueError("need one random generator per state")
        cfg = self.config
        with ad.no_grad():
            masks = self._element_masks(states)
            batch, atoms, bag, per_atom = self._trunk(states)
            n = batch.counts
            focal_logp = ad.segment_log_softmax(self.focal_net(per_atom).reshape((batch.n_atoms,)),
                                                batch.mol, batch.n_mols).data
            draws = [None] * len(states)
            if not deterministic:
                draws = [(r.random(2), r.standard_normal(3), r.random()) for r in rngs]
            focal = np.zeros(len(states), dtype=np.intp)
            for w in range(len(states)):
                if n[w] == 0:
                    continue
                p = np.exp(focal_logp[batch.offsets[w]:batch.offsets[w] + n[w]])
                focal[w] = int(np.argmax(p)) if deterministic else _categorical(draws[w][0][0], p)
            rows = self._focal_rows(atoms, bag, batch, np.where(n > 0, batch.offsets + focal, batch.n_atoms))
            elem_logp = ad.log_softmax(self.element_net(rows), masks).data
            elem_index = np.zeros(len(states), dtype=np.intp)
            for w in range(len(states)):
                p = np.where(masks[w], np.exp(elem_logp[w]), 0.0)
                elem_index[w] = int(np.argmax(p)) if deterministic else _categorical(draws[w][0][1], p)
            onehot = np.eye(cfg.e_max)[elem_index]
            mu = self._means(rows, onehot).data
            sigma = np.exp(self.log_std.data)
            value = self._value(atoms, bag, batch).data
            samples = []
            for w, s in enumerate(states):
                use = active_components(int(n[w]), cfg.use_kappa)
                x = mu[w] if deterministic else mu[w] + sigma * draws[w][1]
                x = np.where([use["distance"], use["angle"], use["dihedral"]], x, 0.0)
                samples.append(ActionSample(int(focal[w]), int(elem_index[w]) + 1, float(x[0]), float(x[1]),
                                            float(x[2]), 1, int(n[w]), signed=not cfg.use_kappa,
                                            value=float(value[w])))
            kappa_ids = [w for w, smp in enumerate(samples) if active_components(smp.n_atoms, cfg.use_kappa)["kappa"]]
            if kappa_ids:
                for w in kappa_ids:
                    smp = samples[w]
                    smp.candidates = candidate_positions(states[w], smp.focal, smp.distance, smp.angle,
                                                         smp.dihedral, cfg.d_min, cfg.d_max)
                logits = self._sign_logits([states[w] for w in kappa_ids],
                                           [samples[w].element for w in kappa_ids],
                                           [samples[w].candidates for w in kappa_ids])
                kappa_logp = ad.log_softmax(logits).data
                for k, w in enumerate(kappa_ids):
                    p_plus = float(np.exp(kappa_logp[k, 0]))
                    samples[w].p_plus = p_plus
                    if deterministic:
                        samples[w].kappa = 1 if p_plus >= 0.5 else -1
                    else:
                        samples[w].kappa = 1 if draws[w][2] < p_plus else -1
        # score with the same code path PPO uses, so old and new log-probs agree
        with ad.no_grad():
            logp, entropy, _ = self.evaluate(states, samples)
        for smp, lp, h in zip(samples, logp.data, entropy.data):
            smp.log_prob, smp.entropy = float(lp), float(h)
        return samples

    def act_one(self, state: State, rng=None, deterministic: bool = False) -> ActionSample:
        return self.act([state], None if rng is None else [rng], deterministic)[0]

    # ------------------------------------------------------------ scoring

    def evaluate(self, states, samples) -> tuple[Tensor, Tensor, Tensor]:
        """Log-probability, categorical entropy and value for given actions (differentiable)."""
        states, samples = list(states), list(samples)
        if len(states) != len(samples):
            raise ValueError("one sample per state")
        cfg = self.config
        for s, smp in zip(states, samples):
            if smp.n_atoms != len(s.canvas):
                raise ArityMismatch(f"action drawn for {smp.n_atoms} atoms, state has {len(s.canvas)}")
            if smp.signed == cfg.use_kappa:
                raise ArityMismatch("action parameterization does not match the sign-head setting")
        masks = self._element_masks(states)
        batch, atoms, bag, per_atom = self._trunk(states)
        n = batch.counts
        focal = np.array([smp.focal for smp in samples], dtype=np.intp)
        if np.any((n > 0) & ((focal < 0) | (focal >= np.maximum(n, 1)))):
            raise ArityMismatch("focal index outside the canvas")
        elem_index = np.array([smp.element - 1 for smp in samples], dtype=np.intp)
        if not masks[np.arange(len(states)), elem_index].all():
            raise ArityMismatch("element not available in the bag")

        focal_logp = ad.segment_log_softmax(self.focal_net(per_atom).reshape((batch.n_atoms,)),
                                            batch.mol, batch.n_mols)
        focal_ent = ad.neg(ad.segment_sum(ad.exp(focal_logp) * focal_logp, batch.mol, batch.n_mols))
        has_atoms = n > 0
        padded = ad.concat([focal_logp, Tensor(np.zeros(1))], axis=0)
        logp = ad.take(padded, np.where(has_atoms, batch.offsets + focal, batch.n_atoms))

        rows = self._focal_rows(atoms, bag, batch, np.where(has_atoms, batch.offsets + focal, batch.n_atoms))
        elem_logp = ad.log_softmax(self.element_net(rows), masks)
        elem_ent = ad.neg(ad.tsum(ad.where(masks, ad.exp(elem_logp) * elem_logp, 0.0), axis=1))
        logp = logp + ad.pick(elem_logp, elem_index)
        entropy = focal_ent + elem_ent

        mu = self._means(rows, np.eye(cfg.e_max)[elem_index])
        x = np.array([[smp.distance, smp.angle, smp.dihedral] for smp in samples])
        z = (Tensor(x) - mu) / ad.exp(self.log_std)
        gauss = ad.square(z) * -0.5 - self.log_std - _HALF_LOG_2PI
        use = np.array([[c["distance"], c["angle"], c["dihedral"]]
                        for c in (active_components(int(k), cfg.use_kappa) for k in n)])
        logp = logp + ad.tsum(ad.where(use, gauss, 0.0), axis=1)

        kappa_ids = [w for w in range(len(states)) if active_components(int(n[w]), cfg.use_kappa)["kappa"]]
        if kappa_ids:
            for w in kappa_ids:
                if samples[w].candidates is None:
                    smp = samples[w]
                    smp.candidates = candidate_positions(states[w], smp.focal, smp.distance, smp.angle,
                                                         smp.dihedral, cfg.d_min, cfg.d_max)
            logits = self._sign_logits([states[w] for w in kappa_ids], [samples[w].element for w in kappa_ids],
                                       [samples[w].candidates for w in kappa_ids])
            kappa_logp = ad.log_softmax(logits)
            chosen = ad.pick(kappa_logp, np.array([0 if samples[w].kappa == 1 else 1 for w in kappa_ids]))
            spread = np.zeros((len(states), len(kappa_ids)))
            spread[kappa_ids, np.arange(len(kappa_ids))] = 1.0
            logp = logp + ad.matmul(Tensor(spread), chosen.reshape((len(kappa_ids), 1))).reshape((len(states),))
            if cfg.kappa_entropy:
                kappa_ent = ad.neg(ad.tsum(ad.exp(kappa_logp) * kappa_logp, axis=1))
                entropy = entropy + ad.matmul(Tensor(spread), kappa_ent.reshape((len(kappa_ids), 1))).reshape((len(states),))
        value = self._value(atoms, bag, batch)
        return logp, entropy, value

    def log_prob_and_entropy(self, state: State, sample: ActionSample) -> tuple[float, float, float]:
        with ad.no_grad():
            logp, ent, value = self.evaluate([state], [sample])
        return float(logp.data[0]), float(ent.data[0]), float(value.data[0])

    # ------------------------------------------------------------ single-state views

    def embed_state(self, state: State) -> StateEmbedding:
        with ad.no_grad():
            _, _, bag, per_atom = self._trunk([state])
        return StateEmbedding(per_atom.data, bag.data[0])

    def critic_value(self, state: State) -> float:
        return self.critic_values([state])[0]

    def critic_values(self, states) -> np.ndarray:
        with ad.no_grad():
            batch, atoms, bag, _ = self._trunk(list(states))
            return self._value(atoms, bag, batch).data.copy()

    def sign_probability(self, state: State, focal: int, element: int, distance: float, angle: float,
                         abs_dihedral: float) -> float:
        """Probability of kappa = +1 for the given partial action."""
        cfg = self.config
        cand = candidate_positions(state, focal, distance, angle, abs_dihedral, cfg.d_min, cfg.d_max)
        with ad.no_grad():
            logits = self._sign_logits([state], [element], [cand])
            return float(np.exp(ad.log_softmax(logits).data[0, 0]))
