"""Small delayed-reward environments with an explicit transition model.

Both environments are finite, so besides the usual ``reset``/``step`` pair
they expose ``transitions(state, action)``. :func:`sufficiency_oracle` uses
that model to compute, by backward induction over the step counter, the
probability that the next environmental signal is positive.

Observations are a one-hot code over cells followed by the normalised step
count ``t / max_episode_steps``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

NONE, POSITIVE, NEGATIVE = "none", "positive", "negative"
PENALTY, DEATH, EPISODE_END = "penalty", "death", "episode_end"
ENV_NAMES = ("delayed-chain", "trap-grid")


class EpisodeFinished(RuntimeError):
    """Raised when stepping an environment whose episode is over."""


class NotEnumerable(TypeError):
    """Raised when an exact model is requested from an environment without one."""


@dataclass(frozen=True)
class EnvSignal:
    kind: str = NONE
    negative_cause: Optional[str] = None
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in (NONE, POSITIVE, NEGATIVE):
            raise ValueError(f"bad signal kind {self.kind!r}")
        if self.kind == NONE and self.magnitude != 0:
            raise ValueError("a null signal carries no magnitude")
        if self.kind == POSITIVE and not self.magnitude > 0:
            raise ValueError("a positive signal needs a positive magnitude")
        if self.kind == NEGATIVE and self.negative_cause not in (PENALTY, DEATH, EPISODE_END):
            raise ValueError(f"bad negative cause {self.negative_cause!r}")
        if self.kind != NEGATIVE and self.negative_cause is not None:
            raise ValueError("only negative signals carry a cause")

    @property
    def is_null(self) -> bool:
        return self.kind == NONE


NULL_SIGNAL = EnvSignal()


def positive(magnitude=1.0) -> EnvSignal:
    return EnvSignal(POSITIVE, None, float(magnitude))


def negative(cause, magnitude=0.0) -> EnvSignal:
    return EnvSignal(NEGATIVE, cause, abs(float(magnitude)))


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    env_reward: float
    signal: EnvSignal
    done: bool


def _parse_cell(v) -> Tuple[int, int]:
    if isinstance(v, str):
        parts = [p for p in v.replace("(", "").replace(")", "").split(",") if p.strip()]
        v = tuple(int(p) for p in parts)
    v = tuple(int(x) for x in v)
    if len(v) != 2:
        raise ValueError(f"a grid cell needs two coordinates, got {v}")
    return v


@dataclass
class EnvConfig:
    env_name: str = "delayed-chain"
    max_episode_steps: int = 200
    hindsight: bool = False
    seed: int = 0
    # delayed-chain
    chain_length: int = 20
    corridor: int = 5
    random_start: bool = False
    # trap-grid
    grid_height: int = 5
    grid_width: int = 5
    start: Tuple[int, int] = (0, 0)
    goal: Tuple[int, int] = (4, 4)
    traps: Tuple[Tuple[int, int], ...] = ((2, 2),)
    goal_delay: int = 15
    goal_reward: float = 1.0

    def __post_init__(self):
        self.start = _parse_cell(self.start)
        self.goal = _parse_cell(self.goal)
        if isinstance(self.traps, str):
            self.traps = tuple(_parse_cell(t) for t in self.traps.split(";") if t.strip())
        else:
            self.traps = tuple(_parse_cell(t) for t in self.traps)

    def validate(self):
        if self.env_name not in ENV_NAMES:
            raise ValueError(f"unknown environment {self.env_name!r}, expected one of {ENV_NAMES}")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be at least 1")
        if not self.goal_reward > 0:
            raise ValueError("goal_reward must be positive")
        if self.env_name == "delayed-chain":
            if self.chain_length < 2 or not 1 <= self.corridor <= self.chain_length - 1:
                raise ValueError("delayed-chain needs chain_length >= 2 and 1 <= corridor < chain_length")
        else:
            h, w = self.grid_height, self.grid_width
            if h < 1 or w < 1 or h * w < 2:
                raise ValueError("trap-grid needs at least two cells")
            for name, cell in [("start", self.start), ("goal", self.goal), *[("trap", t) for t in self.traps]]:
                if not (0 <= cell[0] < h and 0 <= cell[1] < w):
                    raise ValueError(f"{name} cell {cell} lies outside the {h}x{w} grid")
            if self.start == self.goal or self.start in self.traps or self.goal in self.traps:
                raise ValueError("start, goal and traps must be distinct cells")
            if self.goal_delay < 0:
                raise ValueError("goal_delay must be non-negative")
        return self


# transition tuples: (probability, next core state, reward, signal)
Transition = Tuple[float, object, float, EnvSignal]


class DiscreteEnv:
    """Finite environment over hashable core states plus a step counter.

    Subclasses describe the untimed dynamics; this class adds the step
    budget, truncation and the time feature of the observation.
    """

    n_actions: int

    def __init__(self, config: EnvConfig):
        self.config = config.validate()
        self.max_steps = config.max_episode_steps
        self.rng = np.random.default_rng(config.seed)
        self.core = None
        self.t = 0
        self.done = True
        self._index = {s: i for i, s in enumerate(self.core_states())}

    # --- subclass hooks
    def core_states(self) -> List:
        raise NotImplementedError

    def initial_distribution(self) -> List[Tuple[float, object]]:
        raise NotImplementedError

    def core_transitions(self, core, action) -> List[Transition]:
        raise NotImplementedError

    # --- model
    @property
    def obs_dim(self) -> int:
        return len(self._index) + 1

    def observe(self, core, t) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[self._index[core]] = 1.0
        obs[-1] = t / self.max_steps
        return obs

    def transitions(self, state, action) -> List[Tuple[float, tuple, float, EnvSignal, bool]]:
        """Exact model over timed states ``(core, t)``, truncation included.

        Returns ``(prob, next_state, reward, signal, done)`` tuples.
        """
        core, t = state
        out = []
        for p, nxt, r, sig in self.core_transitions(core, action):
            done = sig.kind == NEGATIVE and sig.negative_cause == DEATH
            if not done and t + 1 >= self.max_steps:
                done = True
                if sig.is_null:
                    sig = negative(EPISODE_END)
            out.append((p, (nxt, t + 1), r, sig, done))
        return out

    # --- simulation
    def seed(self, seed):
        self.rng = np.random.default_rng(seed)

    def reset(self) -> np.ndarray:
        dist = self.initial_distribution()
        k = self.rng.choice(len(dist), p=[p for p, _ in dist]) if len(dist) > 1 else 0
        self.core = dist[k][1]
        self.t = 0
        self.done = False
        return self.observe(self.core, self.t)

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeFinished("episode is over; call reset()")
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} outside [0, {self.n_actions})")
        outcomes = self.transitions((self.core, self.t), action)
        k = self.rng.choice(len(outcomes), p=[o[0] for o in outcomes]) if len(outcomes) > 1 else 0
        _, (core, t), r, sig, done = outcomes[k]
        self.core, self.t, self.done = core, t, done
        return StepResult(self.observe(core, t), float(r), sig, done)

    @property
    def state(self):
        return (self.core, self.t)


class DelayedChain(DiscreteEnv):
    """1-D corridor of ``chain_length`` cells; action 0 moves left, 1 right.

    The last ``corridor`` cells are absorbing toward the terminal cell: once
    inside, every action moves right. Reaching the terminal cell pays
    ``goal_reward`` and puts the agent back at the start; the episode runs
    until the step budget. The terminal cell itself is never observed.
    """

    n_actions = 2

    @property
    def corridor_start(self) -> int:
        return self.config.chain_length - self.config.corridor

    def core_states(self):
        return list(range(self.config.chain_length - 1))

    def start_cells(self):
        return list(range(self.corridor_start)) if self.config.random_start else [0]

    def initial_distribution(self):
        cells = self.start_cells()
        return [(1.0 / len(cells), c) for c in cells]

    def core_transitions(self, pos, action):
        n = self.config.chain_length
        if pos >= self.corridor_start or action == 1:
            nxt = pos + 1
        else:
            nxt = max(pos - 1, 0)
        if nxt == n - 1:
            g = self.config.goal_reward
            return [(p, c, g, positive(g)) for p, c in self.initial_distribution()]
        return [(1.0, nxt, 0.0, NULL_SIGNAL)]


class TrapGrid(DiscreteEnv):
    """Grid with a goal, trap cells and a delayed goal payout.

    Actions: 0 up, 1 down, 2 left, 3 right; moves off the grid leave the
    agent in place. Entering a trap is a death. Entering the goal freezes
    the agent for ``goal_delay`` steps, after which ``goal_reward`` is paid
    and the agent returns to the start cell. Each remaining-delay count has
    its own observation code.
    """

    n_actions = 4
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def core_states(self):
        c = self.config
        cells = [(r, k) for r in range(c.grid_height) for k in range(c.grid_width)
                 if (r, k) not in c.traps and (r, k) != c.goal]
        # (cell, remaining freeze steps); only the goal carries a counter
        states = [(cell, 0) for cell in cells]
        states += [(c.goal, d) for d in range(c.goal_delay, 0, -1)]
        return states

    def initial_distribution(self):
        return [(1.0, (self.config.start, 0))]

    def _payout(self):
        g = self.config.goal_reward
        return [(1.0, (self.config.start, 0), g, positive(g))]

    def core_transitions(self, core, action):
        c = self.config
        cell, freeze = core
        if freeze > 0:
            if freeze == 1:
                return self._payout()
            return [(1.0, (cell, freeze - 1), 0.0, NULL_SIGNAL)]
        dr, dc = self.MOVES[action]
        r, k = cell[0] + dr, cell[1] + dc
        if not (0 <= r < c.grid_height and 0 <= k < c.grid_width):
            r, k = cell
        nxt = (r, k)
        if nxt in c.traps:
            return [(1.0, (cell, 0), 0.0, negative(DEATH))]
        if nxt == c.goal:
            if c.goal_delay == 0:
                return self._payout()
            return [(1.0, (nxt, c.goal_delay), 0.0, NULL_SIGNAL)]
        return [(1.0, (nxt, 0), 0.0, NULL_SIGNAL)]

    def optimal_return(self) -> float:
        """Best achievable episode return, by shortest start-to-goal path."""
        c = self.config
        dist = _grid_distance(c)
        if dist is None:
            return 0.0
        lap = dist + c.goal_delay
        # the first payout lands on step `lap`, later ones every `lap` steps
        return float(c.goal_reward * (self.max_steps // lap))


def _grid_distance(c: EnvConfig) -> Optional[int]:
    from collections import deque

    seen = {c.start: 0}
    queue = deque([c.start])
    while queue:
        cell = queue.popleft()
        if cell == c.goal:
            return seen[cell]
        for dr, dc in TrapGrid.MOVES:
            nxt = (cell[0] + dr, cell[1] + dc)
            if (0 <= nxt[0] < c.grid_height and 0 <= nxt[1] < c.grid_width
                    and nxt not in c.traps and nxt not in seen):
                seen[nxt] = seen[cell] + 1
                queue.append(nxt)
    return None


def chain_optimal_return(config: EnvConfig) -> float:
    """Best achievable return on delayed-chain from the fixed start cell."""
    lap = config.chain_length - 1
    return float(config.goal_reward * (config.max_episode_steps // lap))


# ------------------------------------------------------------- hindsight


class HindsightBuffer:
    """Withholds positive rewards until the next negative signal or episode end."""

    def __init__(self):
        self.pending = 0.0

    def reset(self):
        self.pending = 0.0

    def __call__(self, res: StepResult) -> StepResult:
        r = res.env_reward
        if r > 0:
            self.pending += r
            r = 0.0
        if res.signal.kind == NEGATIVE or res.done:
            r += self.pending
            self.pending = 0.0
        return StepResult(res.observation, r, res.signal, res.done)


def hindsight_wrap(stream: Iterable[StepResult]) -> Iterator[StepResult]:
    buf = HindsightBuffer()
    for res in stream:
        yield buf(res)
        if res.done:
            buf.reset()


class HindsightEnv:
    """Environment wrapper applying :class:`HindsightBuffer` to every step.

    Signals pass through untouched, so round labelling still sees them on
    time; only reward magnitudes are delayed.
    """

    def __init__(self, env: DiscreteEnv):
        self.env = env
        self.buffer = HindsightBuffer()

    def __getattr__(self, name):
        return getattr(self.env, name)

    def reset(self):
        self.buffer.reset()
        return self.env.reset()

    def step(self, action):
        return self.buffer(self.env.step(action))


def make_env(config: EnvConfig, seed: Optional[int] = None):
    cls = DelayedChain if config.env_name == "delayed-chain" else TrapGrid
    env = cls(config)
    if seed is not None:
        env.seed(seed)
    return HindsightEnv(env) if config.hindsight else env


def optimal_return(config: EnvConfig) -> float:
    if config.env_name == "delayed-chain":
        return chain_optimal_return(config)
    return TrapGrid(config).optimal_return()


# ------------------------------------------------------------- oracle

Policy = Callable[[np.ndarray], np.ndarray]


def success_probabilities(env: DiscreteEnv, policy: Policy) -> Dict[tuple, float]:
    """P(next environmental signal is positive | state) for every timed state.

    ``policy`` maps a batch of observations ``(n, obs_dim)`` to action
    probabilities ``(n, n_actions)``. States are ``(core, t)`` pairs.
    """
    env = getattr(env, "env", env)
    if not isinstance(env, DiscreteEnv):
        raise NotEnumerable(f"{type(env).__name__} exposes no transition model")
    cores = env.core_states()
    T = env.max_steps
    states = [(c, t) for t in range(T) for c in cores]
    obs = np.stack([env.observe(c, t) for c, t in states])
    probs = np.asarray(policy(obs), dtype=float)
    if probs.shape != (len(states), env.n_actions):
        raise ValueError(f"policy returned shape {probs.shape}, expected {(len(states), env.n_actions)}")
    pi = {s: probs[i] for i, s in enumerate(states)}
    value: Dict[tuple, float] = {}
    for t in range(T - 1, -1, -1):
        for c in cores:
            s = (c, t)
            total = 0.0
            for a in range(env.n_actions):
                pa = pi[s][a]
                if pa == 0.0:
                    continue
                acc = 0.0
                for p, nxt, _, sig, done in env.transitions(s, a):
                    if sig.kind == POSITIVE:
                        acc += p
                    elif sig.is_null and not done:
                        acc += p * value[nxt]
                total += pa * acc
            value[s] = total
    return value


def sufficiency_oracle(config_or_env, policy: Policy, eps: float = 1e-6) -> set:
    """Timed states whose next signal is positive with probability >= 1 - eps."""
    if not 0 <= eps <= 1:
        raise ValueError("eps must lie in [0, 1]")
    env = make_env(config_or_env) if isinstance(config_or_env, EnvConfig) else config_or_env
    value = success_probabilities(env, policy)
    return {s for s, v in value.items() if v >= 1.0 - eps}
