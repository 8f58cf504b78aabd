"""Advantage actor-critic with n-step returns and k rollout workers.

Workers act on the current parameters, fill their own n-step buffers and
compute gradients of the surrogate loss; a single writer averages those
gradients and applies them. Within one collection round all workers see the
same parameters, so nothing is mutated while it is being read.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import nn
from .envs import EnvConfig, make_env
from .extractor import CalibrationState, EsceClassifier
from .rounds import PoolSet, Round, RoundBuilder

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardMix:
    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("reward weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")


def mix_rewards(r_c: float, r_e: float, mix: RewardMix) -> float:
    return mix.alpha * r_c + mix.beta * r_e


class PolicyNet:
    """Shared trunk with an action-logit head and a scalar value head."""

    def __init__(self, obs_dim, n_actions, hidden_sizes=(64, 64), activation="tanh", rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.trunk = nn.mlp(obs_dim, hidden_sizes[:-1], hidden_sizes[-1], activation=activation,
                            output_activation=activation, rng=rng)
        width = hidden_sizes[-1]
        self.policy_head = nn.mlp(width, (), n_actions, rng=rng)
        self.value_head = nn.mlp(width, (), 1, rng=rng)
        self.n_actions = n_actions

    @property
    def obs_dim(self):
        return self.trunk.input_dim

    def nets(self):
        return (self.trunk, self.policy_head, self.value_head)

    def params(self) -> List[np.ndarray]:
        return [p for n in self.nets() for p in n.params()]

    def forward(self, X, return_cache=False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        h, c_trunk = nn.forward(self.trunk, X, return_cache=True)
        logits, c_pi = nn.forward(self.policy_head, h, return_cache=True)
        values, c_v = nn.forward(self.value_head, h, return_cache=True)
        if return_cache:
            return logits, values[:, 0], (c_trunk, c_pi, c_v)
        return logits, values[:, 0]

    def probabilities(self, X) -> np.ndarray:
        return nn.softmax(self.forward(X)[0])

    @classmethod
    def from_nets(cls, trunk: nn.DenseNet, policy_head: nn.DenseNet, value_head: nn.DenseNet) -> "PolicyNet":
        if trunk.output_dim != policy_head.input_dim or trunk.output_dim != value_head.input_dim:
            raise nn.ShapeError("heads do not fit the trunk")
        if value_head.output_dim != 1:
            raise nn.ShapeError("value head must have one output")
        new = object.__new__(cls)
        new.trunk, new.policy_head, new.value_head = trunk, policy_head, value_head
        new.n_actions = policy_head.output_dim
        return new

    def copy(self) -> "PolicyNet":
        return PolicyNet.from_nets(*(n.copy() for n in self.nets()))

    def is_finite(self) -> bool:
        return all(n.is_finite() for n in self.nets())


def act(policy: PolicyNet, obs, rng: np.random.Generator, greedy=False):
    """Sample (or pick the argmax) action; returns (action, log-prob, value)."""
    logits, values = policy.forward(np.asarray(obs, dtype=float)[None, :])
    logp = nn.log_softmax(logits[0])
    if greedy:
        a = int(np.argmax(logp))
    else:
        # inverse-cdf draw: exactly one uniform per step
        cdf = np.cumsum(np.exp(logp))
        a = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), policy.n_actions - 1)
    return a, float(logp[a]), float(values[0])


def compute_returns(rewards, dones, values, bootstrap: float, gamma: float):
    """n-step discounted returns and advantages.

    ``R_t = r_t + gamma * R_{t+1}``, cut at ``done`` flags and seeded with
    ``bootstrap`` after the last step.
    """
    rewards = np.asarray(rewards, dtype=float)
    if not len(rewards):
        raise ValueError("empty rollout buffer")
    dones = np.asarray(dones, dtype=bool)
    returns = np.empty_like(rewards)
    running = float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns, returns - np.asarray(values, dtype=float)


def surrogate_loss_and_grads(policy: PolicyNet, obs, actions, returns, advantages,
                             entropy_coeff=0.01, value_coeff=0.5):
    """Loss ``-log pi(a|s) A + c_v (R - V)^2 - c_e H`` (batch means) and its gradient.

    Gradients come back as a flat list aligned with ``policy.params()``.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    logits, values, (c_trunk, c_pi, c_v) = policy.forward(obs, return_cache=True)
    pg_loss, g_logits = nn.policy_gradient_loss(logits, actions, advantages)
    v_loss, g_v = nn.squared_loss(values[:, None], np.asarray(returns, dtype=float)[:, None])
    entropy, g_h = nn.entropy_and_grad(logits)
    g_logits = g_logits - entropy_coeff * g_h
    g_v = value_coeff * g_v
    grads_pi, dh_pi = nn.backprop(policy.policy_head, c_pi, g_logits)
    grads_v, dh_v = nn.backprop(policy.value_head, c_v, g_v)
    grads_trunk, _ = nn.backprop(policy.trunk, c_trunk, dh_pi + dh_v)
    total = pg_loss + value_coeff * v_loss - entropy_coeff * entropy
    losses = {"loss": total, "policy": pg_loss, "value": v_loss, "entropy": entropy}
    flat = grads_trunk.arrays() + grads_pi.arrays() + grads_v.arrays()
    return losses, flat


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: Optional[float]):
    if not max_norm:
        return list(grads)
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm <= max_norm:
        return list(grads)
    return [g * (max_norm / norm) for g in grads]


def update(policy: PolicyNet, batch: "RolloutBuffer", opt: nn.Optimizer, entropy_coeff=0.01,
           value_coeff=0.5, bootstrap=0.0, max_grad_norm=None):
    """One gradient application from a filled buffer; None if skipped."""
    returns, adv = compute_returns(batch.rewards, batch.dones, batch.values, bootstrap, batch.gamma)
    if not np.all(np.isfinite(adv)):
        log.warning("non-finite advantage, update skipped")
        return None
    losses, grads = surrogate_loss_and_grads(policy, batch.obs, batch.actions, returns, adv,
                                             entropy_coeff, value_coeff)
    opt.apply(policy.params(), clip_by_global_norm(grads, max_grad_norm))
    return losses


@dataclass
class RolloutBuffer:
    n_steps: int
    gamma: float
    obs: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    dones: List[bool] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")

    def add(self, obs, action, reward, value, done):
        if len(self.rewards) >= self.n_steps:
            raise OverflowError("rollout buffer is full")
        self.obs.append(obs)
        self.actions.append(action)
        self.rewards.append(reward)
        self.values.append(value)
        self.dones.append(done)

    @property
    def full(self):
        return len(self.rewards) >= self.n_steps

    def __len__(self):
        return len(self.rewards)


# ------------------------------------------------------------------ workers


@dataclass
class EpisodeStats:
    worker: int
    raw_env_return: float = 0.0
    mixed_return: float = 0.0
    calibrated_reward_count: int = 0
    length: int = 0


@dataclass
class WorkerOutput:
    worker: int
    steps: int
    rounds: List[Round]
    episodes: List[EpisodeStats]
    grads: Optional[List[np.ndarray]]
    losses: Optional[dict]


class RolloutWorker:
    """Owns one environment instance and its in-progress episode."""

    def __init__(self, index: int, env_config: EnvConfig, seed: int):
        self.index = index
        self.env = make_env(env_config, seed=seed)
        self.rng = np.random.default_rng(seed + 7919)
        self.obs = self.env.reset()
        self.builder = RoundBuilder()
        self.cal = CalibrationState()
        self.episode = EpisodeStats(index)

    def clear_storage(self):
        self.builder.clear()

    def collect(self, policy: PolicyNet, esce: Optional[EsceClassifier], mix: RewardMix, n_steps: int,
                gamma: float, entropy_coeff: float, value_coeff: float, greedy: bool = False) -> WorkerOutput:
        buf = RolloutBuffer(n_steps, gamma)
        rounds, finished = [], []
        use_esce = esce is not None and esce.is_trained
        if use_esce and self.cal.calibrated_magnitude != esce.calibrated_magnitude:
            self.cal = CalibrationState(self.cal.rewarded_this_round, float(esce.calibrated_magnitude))
        while not buf.full:
            obs = self.obs
            a, _, v = act(policy, obs, self.rng, greedy=greedy)
            res = self.env.step(a)
            r_c = 0.0
            if use_esce:
                r_c, self.cal = esce.calibrate(obs, self.cal, res.signal)
            elif not res.signal.is_null:
                self.cal = CalibrationState(False, self.cal.calibrated_magnitude)
            r = mix_rewards(r_c, res.env_reward, mix)
            buf.add(obs, a, r, v, res.done)
            ep = self.episode
            ep.raw_env_return += res.env_reward
            ep.mixed_return += r
            ep.calibrated_reward_count += int(r_c != 0)
            ep.length += 1
            rnd = self.builder.add(obs, res.signal, res.done)
            if rnd is not None:
                rounds.append(rnd)
            if res.done:
                finished.append(ep)
                self.episode = EpisodeStats(self.index)
                self.cal = CalibrationState(False, self.cal.calibrated_magnitude)
                self.builder.clear()
                self.obs = self.env.reset()
            else:
                self.obs = res.observation
        bootstrap = 0.0 if buf.dones[-1] else float(policy.forward(self.obs[None, :])[1][0])
        returns, adv = compute_returns(buf.rewards, buf.dones, buf.values, bootstrap, gamma)
        grads = losses = None
        if np.all(np.isfinite(adv)):
            losses, grads = surrogate_loss_and_grads(policy, buf.obs, buf.actions, returns, adv,
                                                     entropy_coeff, value_coeff)
        return WorkerOutput(self.index, len(buf), rounds, finished, grads, losses)


@dataclass
class CollectionResult:
    steps: int = 0
    updates: int = 0
    skipped_updates: int = 0
    rounds: List[Round] = field(default_factory=list)
    episodes: List[EpisodeStats] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)
    pushed_rounds: int = 0


class WorkerGroup:
    """k rollout workers feeding one serialized gradient writer."""

    def __init__(self, k: int, env_config: EnvConfig, seed: int, n_steps=8, gamma=0.99,
                 entropy_coeff=0.01, value_coeff=0.5, max_grad_norm=None, greedy=False):
        if k < 1:
            raise ValueError("need at least one worker")
        self.workers = [RolloutWorker(i, env_config, seed * 1000 + i) for i in range(k)]
        self.active = list(self.workers)
        self.n_steps = n_steps
        self.gamma = gamma
        self.entropy_coeff = entropy_coeff
        self.value_coeff = value_coeff
        self.max_grad_norm = max_grad_norm
        self.greedy = greedy
        self._pool = ThreadPoolExecutor(max_workers=k) if k > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def clear_storage(self):
        for w in self.workers:
            w.clear_storage()

    def _run_one(self, w, policy, esce, mix):
        try:
            return w.collect(policy, esce, mix, self.n_steps, self.gamma, self.entropy_coeff, self.value_coeff,
                             self.greedy)
        except Exception as exc:  # contained: the other workers carry on
            log.exception("worker %d failed", w.index)
            return exc

    def collect(self, policy: PolicyNet, opt: Optional[nn.Optimizer], pools: Optional[PoolSet],
                esce: Optional[EsceClassifier], mix: RewardMix, steps_budget: int,
                stop: Optional[Callable[[], bool]] = None) -> CollectionResult:
        """Roll out until ``steps_budget`` env steps or ``stop()`` is true.

        Pass ``opt=None`` to keep the policy frozen.
        """
        out = CollectionResult()
        while out.steps < steps_budget and not (stop is not None and stop()):
            if not self.active:
                raise RuntimeError("all rollout workers failed: " + "; ".join(out.failures))
            if self._pool is None:
                results = [self._run_one(w, policy, esce, mix) for w in self.active]
            else:
                results = list(self._pool.map(lambda w: self._run_one(w, policy, esce, mix), self.active))
            grads = []
            for w, res in zip(list(self.active), results):
                if isinstance(res, Exception):
                    out.failures.append(f"worker {w.index}: {res!r}")
                    self.active.remove(w)
                    continue
                out.steps += res.steps
                out.rounds.extend(res.rounds)
                out.episodes.extend(res.episodes)
                if pools is not None:
                    for rnd in res.rounds:
                        pools.push_round(rnd)
                    out.pushed_rounds += len(res.rounds)
                if res.grads is None:
                    out.skipped_updates += 1
                else:
                    grads.append(res.grads)
            if opt is not None and grads:
                mean = [sum(gs) / len(grads) for gs in zip(*grads)]
                opt.apply(policy.params(), clip_by_global_norm(mean, self.max_grad_norm))
                out.updates += 1
        return out


def run_workers(k: int, policy: PolicyNet, opt, pools: PoolSet, esce, mix: RewardMix,
                env_config: EnvConfig, steps_budget: int, seed: int = 0, **kwargs) -> CollectionResult:
    """Convenience wrapper: fresh workers, one collection pass."""
    group = WorkerGroup(k, env_config, seed, **kwargs)
    try:
        return group.collect(policy, opt, pools, esce, mix, steps_budget)
    finally:
        group.close()
