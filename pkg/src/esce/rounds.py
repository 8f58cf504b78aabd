"""Cutting trajectories into signal-labelled rounds and pooling their states."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence

import numpy as np

from .envs import EPISODE_END, POSITIVE, EnvSignal, negative

POOL_NAMES = ("positive", "negative", "sensitive_miss", "sensitive_false")


@dataclass
class Transition:
    observation: np.ndarray  # state the action was taken in
    action: int
    env_reward: float
    signal: EnvSignal
    done: bool
    step_index: int


@dataclass
class Round:
    states: List[np.ndarray]
    terminating_signal: EnvSignal

    def __post_init__(self):
        if not self.states:
            raise ValueError("a round holds at least one state")
        if self.terminating_signal.is_null:
            raise ValueError("a round must end on an environmental signal")

    @property
    def label(self) -> str:
        return "positive" if self.terminating_signal.kind == POSITIVE else "negative"

    @property
    def positive(self) -> bool:
        return self.terminating_signal.kind == POSITIVE

    def __len__(self):
        return len(self.states)


class RoundBuilder:
    """Temporary storage: collects states until a signal closes the round."""

    def __init__(self):
        self.states: List[np.ndarray] = []
        self.last_step: Optional[int] = None

    def add(self, observation, signal: EnvSignal, done: bool = False, step_index: Optional[int] = None):
        """Append one state; returns the finished :class:`Round` or None."""
        if step_index is not None:
            if self.last_step is not None and step_index <= self.last_step:
                raise ValueError("step_index must increase within a trajectory")
            self.last_step = step_index
        self.states.append(np.asarray(observation, dtype=float))
        if signal.is_null and done:
            signal = negative(EPISODE_END)
        if signal.is_null:
            return None
        rnd = Round(self.states, signal)
        self.states = []
        if done:
            self.last_step = None
        return rnd

    def clear(self):
        self.states = []
        self.last_step = None


def segment(trajectory: Sequence[Transition]) -> List[Round]:
    """Split one finished episode into rounds.

    The state on which a signal arrives closes its round; the next round
    starts with the following state.
    """
    if not trajectory or not trajectory[-1].done:
        raise ValueError("segment() needs a trajectory that ends with done=True")
    builder = RoundBuilder()
    rounds = []
    for tr in trajectory:
        rnd = builder.add(tr.observation, tr.signal, tr.done, tr.step_index)
        if rnd is not None:
            rounds.append(rnd)
    return rounds


class Pool:
    """Fixed-capacity FIFO of observations sharing one label."""

    def __init__(self, capacity: int, label: int):
        if capacity < 1:
            raise ValueError("pool capacity must be positive")
        self.capacity = int(capacity)
        self.label = int(label)
        self._data: Optional[np.ndarray] = None
        self._ptr = 0
        self.size = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    @property
    def full(self) -> bool:
        return self.size >= self.capacity

    def extend(self, states: Iterable[np.ndarray]):
        for s in states:
            s = np.asarray(s, dtype=float)
            if self._data is None:
                self._data = np.zeros((self.capacity, s.shape[0]))
            self._data[self._ptr] = s
            self._ptr = (self._ptr + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
            self.inserted += 1

    def states(self) -> np.ndarray:
        """Contents, oldest first."""
        if self.size == 0:
            return np.zeros((0, 0 if self._data is None else self._data.shape[1]))
        if self.size < self.capacity:
            return self._data[: self.size].copy()
        return np.concatenate([self._data[self._ptr:], self._data[: self._ptr]])

    def clear(self):
        self._ptr = 0
        self.size = 0

    def keep_newest(self, n: int):
        """Drop everything except the ``n`` most recent entries."""
        n = max(0, min(int(n), self.size))
        if n == self.size:
            return
        recent = self.states()[self.size - n:]
        self.clear()
        self.extend(recent)
        self.inserted -= n


class Batch(NamedTuple):
    X: np.ndarray
    y: np.ndarray
    sensitive: np.ndarray  # True where the row came from a sensitive pool


class PoolSet:
    """Positive, negative, miss-identified and false-identified state pools.

    Writes go through a lock so several rollout workers can share one set.
    """

    def __init__(self, capacity: int = 2000, sensitive_capacity: int = 500):
        self.positive = Pool(capacity, 1)
        self.negative = Pool(capacity, 0)
        self.sensitive_miss = Pool(sensitive_capacity, 1)
        self.sensitive_false = Pool(sensitive_capacity, 0)
        self.lock = threading.Lock()
        self._sensitive_mark = {"sensitive_miss": 0, "sensitive_false": 0}

    def pools(self):
        return {name: getattr(self, name) for name in POOL_NAMES}

    def sizes(self) -> dict:
        return {name: len(p) for name, p in self.pools().items()}

    @property
    def main_full(self) -> bool:
        return self.positive.full and self.negative.full

    def push_round(self, rnd: Round):
        target = self.positive if rnd.positive else self.negative
        with self.lock:
            target.extend(rnd.states)

    def record_sensitive(self, rounds: Sequence[Round], flags: Sequence[Sequence[bool]]):
        """Route hard examples into the sensitive pools.

        A positive round with no flagged state is a miss: all its states go to
        ``sensitive_miss``. Flagged states of negative rounds are false
        identifications and go to ``sensitive_false``.
        """
        if len(rounds) != len(flags):
            raise ValueError("one flag sequence per round is required")
        with self.lock:
            for rnd, f in zip(rounds, flags):
                f = np.asarray(f, dtype=bool)
                if f.shape != (len(rnd),):
                    raise ValueError(f"round of {len(rnd)} states got {f.shape[0] if f.ndim else 0} flags")
                if rnd.positive:
                    if not f.any():
                        self.sensitive_miss.extend(rnd.states)
                else:
                    self.sensitive_false.extend(s for s, hit in zip(rnd.states, f) if hit)

    def clear(self, keep_sensitive: bool = False):
        """Empty the main pools.

        Sensitive pools are emptied too, unless ``keep_sensitive``: then the
        states recorded since the previous clear survive for one more round
        and everything older goes.
        """
        with self.lock:
            self.positive.clear()
            self.negative.clear()
            for name in ("sensitive_miss", "sensitive_false"):
                pool = getattr(self, name)
                if keep_sensitive:
                    pool.keep_newest(pool.inserted - self._sensitive_mark[name])
                else:
                    pool.clear()
                self._sensitive_mark[name] = pool.inserted

    def sample_batch(self, n: int, sensitive_fraction: float, rng: np.random.Generator) -> Batch:
        """Draw ``n`` labelled states with replacement.

        ``floor(n * sensitive_fraction)`` rows come from the union of the two
        sensitive pools (or from the main pools when both are empty); the rest
        come uniformly from positive and negative together. Rows are shuffled.
        """
        if not 0 <= sensitive_fraction <= 1:
            raise ValueError("sensitive_fraction must lie in [0, 1]")
        with self.lock:
            main_X = [p.states() for p in (self.positive, self.negative) if len(p)]
            main_y = [np.full(len(p), p.label) for p in (self.positive, self.negative) if len(p)]
            sens_X = [p.states() for p in (self.sensitive_miss, self.sensitive_false) if len(p)]
            sens_y = [np.full(len(p), p.label) for p in (self.sensitive_miss, self.sensitive_false) if len(p)]
        if not main_X:
            raise ValueError("cannot sample: positive and negative pools are both empty")
        mX, my = np.concatenate(main_X), np.concatenate(main_y)
        n_sens = int(np.floor(n * sensitive_fraction)) if sens_X else 0
        idx = rng.integers(0, len(mX), size=n - n_sens)
        X, y = [mX[idx]], [my[idx]]
        if n_sens:
            sX, sy = np.concatenate(sens_X), np.concatenate(sens_y)
            sidx = rng.integers(0, len(sX), size=n_sens)
            X.append(sX[sidx])
            y.append(sy[sidx])
        X, y = np.concatenate(X), np.concatenate(y)
        sens = np.arange(n) >= n - n_sens
        order = rng.permutation(n)
        return Batch(X[order], y[order], sens[order])

    def export(self, path):
        """Write one JSON record per stored state."""
        with self.lock, open(path, "w") as fh:
            for name, pool in self.pools().items():
                label = "positive" if pool.label else "negative"
                for s in pool.states():
                    fh.write(json.dumps({"pool": name, "label": label, "observation": s.tolist()}) + "\n")


def read_pool_export(path) -> PoolSet:
    """Inverse of :meth:`PoolSet.export`; capacities grow to fit the records."""
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    counts = {name: 0 for name in POOL_NAMES}
    for r in records:
        counts[r["pool"]] += 1
    pools = PoolSet(max(1, counts["positive"], counts["negative"]),
                    max(1, counts["sensitive_miss"], counts["sensitive_false"]))
    for r in records:
        getattr(pools, r["pool"]).extend([np.asarray(r["observation"], dtype=float)])
    return pools
