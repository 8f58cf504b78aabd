"""The empirical sufficient condition extractor.

:class:`EsceClassifier` is a binary classifier over observations with a
two-phase training scheme. Phase one is plain binary cross-entropy on
batches drawn from the labelled pools (mostly from the sensitive pools).
Phase two trains on negative states alone, pushing their probability down
until at least a fraction ``sigma`` of the negative pool sits below the
decision threshold. States still flagged after that are treated as
sufficient for a positive signal, and :meth:`EsceClassifier.calibrate`
turns the first such state of each round into a calibrated reward.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .envs import EnvSignal
from .rounds import PoolSet, Round
from .validation import check_observations, check_labels

SIGMA_BAND = (0.81, 1.0)


@dataclass(frozen=True)
class EsceMetrics:
    precision_pos: float
    recall_pos: float
    recall_neg: float
    n_ident: int
    n_suff: int
    n_pos: int
    n_rounds: int = 0

    def as_dict(self) -> dict:
        return {
            "precision_pos": self.precision_pos,
            "recall_pos": self.recall_pos,
            "recall_neg": self.recall_neg,
            "n_ident": self.n_ident,
            "n_suff": self.n_suff,
            "n_pos": self.n_pos,
        }


def round_metrics(flags: Sequence[Sequence[bool]], positive: Sequence[bool], recall_neg: float = 0.0) -> EsceMetrics:
    """Round-level precision and recall of positive identifications.

    ``n_ident`` counts rounds with at least one flagged state, ``n_suff`` the
    positive rounds among them, ``n_pos`` all positive rounds. Ratios with a
    zero denominator are reported as 0.
    """
    if len(flags) != len(positive):
        raise ValueError("flags and round labels must align")
    hit = [bool(np.any(f)) for f in flags]
    n_ident = sum(hit)
    n_suff = sum(h and bool(p) for h, p in zip(hit, positive))
    n_pos = sum(bool(p) for p in positive)
    return EsceMetrics(
        precision_pos=n_suff / n_ident if n_ident else 0.0,
        recall_pos=n_suff / n_pos if n_pos else 0.0,
        recall_neg=float(recall_neg),
        n_ident=n_ident,
        n_suff=n_suff,
        n_pos=n_pos,
        n_rounds=len(flags),
    )


@dataclass(frozen=True)
class CalibrationState:
    rewarded_this_round: bool = False
    calibrated_magnitude: float = 1.0

    def __post_init__(self):
        if not self.calibrated_magnitude > 0:
            raise ValueError("calibrated_magnitude must be positive")


class EsceClassifier(ClassifierMixin, BaseEstimator):
    """Purified binary classifier for empirical sufficient states.

    Parameters
    ----------
    hidden_sizes : tuple of int
        Widths of the hidden layers.
    activation : str
        Hidden activation, one of ``relu``, ``tanh``, ``sigmoid``, ``identity``.
    threshold : float
        A state is flagged when its predicted probability is at least this.
    sigma : float
        Negative-recall target that ends phase two.
    phase1_epochs : int
        Passes over the main pools during phase one.
    phase2_max_iters : int
        Hard cap on phase-two batches.
    batch_size : int
    learning_rate : float
        Adam step size.
    sensitive_fraction : float
        Share of each phase-one batch drawn from the sensitive pools.
    calibrated_magnitude : float
        Value of one calibrated reward.
    random_state : int or None
    """

    def __init__(self, hidden_sizes=(64, 64), activation="tanh", threshold=0.5, sigma=0.95,
                 phase1_epochs=3, phase2_max_iters=500, batch_size=64, learning_rate=1e-3,
                 sensitive_fraction=0.75, calibrated_magnitude=1.0, random_state=None):
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.threshold = threshold
        self.sigma = sigma
        self.phase1_epochs = phase1_epochs
        self.phase2_max_iters = phase2_max_iters
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.sensitive_fraction = sensitive_fraction
        self.calibrated_magnitude = calibrated_magnitude
        self.random_state = random_state

    # ------------------------------------------------------------ set-up

    def _validate_params(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not SIGMA_BAND[0] <= self.sigma <= SIGMA_BAND[1]:
            raise ValueError(f"sigma must lie in [{SIGMA_BAND[0]}, {SIGMA_BAND[1]}], got {self.sigma}")
        if self.phase1_epochs < 1 or self.phase2_max_iters < 1 or self.batch_size < 1:
            raise ValueError("phase budgets and batch_size must be positive")
        if not 0 <= self.sensitive_fraction <= 1:
            raise ValueError("sensitive_fraction must lie in [0, 1]")
        if not self.calibrated_magnitude > 0:
            raise ValueError("calibrated_magnitude must be positive")

    def initialize(self, n_features: int):
        """Build a fresh network and optimizer for ``n_features`` inputs."""
        self._validate_params()
        self.rng_ = np.random.default_rng(self.random_state)
        self.net_ = nn.mlp(n_features, self.hidden_sizes, 1, activation=self.activation,
                           output_activation="sigmoid", rng=self.rng_)
        self.optimizer_ = nn.Optimizer("adam", self.learning_rate)
        self.n_features_in_ = n_features
        self.classes_ = np.array([0, 1])
        self.n_updates_ = 0
        self.phase2_iters_ = 0
        self.phase2_converged_ = True
        return self

    def load_network(self, net: nn.DenseNet, n_updates: int = 1):
        """Adopt an already trained network, e.g. one read from a checkpoint."""
        if net.output_dim != 1 or net.layers[-1].activation != "sigmoid":
            raise nn.ShapeError("extractor network needs a single sigmoid output")
        self.initialize(net.input_dim)
        self.net_ = net
        self.n_updates_ = int(n_updates)
        return self

    @property
    def is_trained(self) -> bool:
        return getattr(self, "n_updates_", 0) > 0

    def _ensure_init(self, n_features):
        if not hasattr(self, "net_"):
            self.initialize(n_features)
        elif self.n_features_in_ != n_features:
            raise nn.ShapeError(f"model expects {self.n_features_in_} features, got {n_features}")

    def _step(self, X, y):
        loss, grads = nn.backward(self.net_, X, "bce", np.asarray(y, dtype=float)[:, None])
        nn.apply_gradients(self.net_, grads, self.optimizer_)
        self.n_updates_ += 1
        return loss

    # ------------------------------------------------------------ training

    def fit(self, X, y):
        """Both training phases on a plain labelled array (1 = positive)."""
        X = check_observations(X)
        y = check_labels(y, len(X))
        pos, neg = X[y == 1], X[y == 0]
        if not len(pos) or not len(neg):
            raise ValueError("fit() needs both positive and negative samples")
        pools = PoolSet(max(len(pos), len(neg)), 1)
        pools.positive.extend(pos)
        pools.negative.extend(neg)
        self.initialize(X.shape[1])
        return self.fit_pools(pools)

    def fit_pools(self, pools: PoolSet):
        """One extractor update: phase one on all pools, then phase two."""
        self.last_phase1_loss_ = self.train_phase1(pools)
        self.phase2_iters_ = self.train_phase2(pools.negative.states())
        return self

    def train_phase1(self, pools: PoolSet, batch_size: Optional[int] = None) -> float:
        """Binary cross-entropy over sensitive-sampled batches; returns last epoch's mean loss."""
        if not len(pools.positive) or not len(pools.negative):
            raise ValueError("phase one needs non-empty positive and negative pools")
        self._ensure_init(pools.positive.states().shape[1])
        bs = batch_size or self.batch_size
        n_batches = math.ceil((len(pools.positive) + len(pools.negative)) / bs)
        epoch_loss = 0.0
        for _ in range(self.phase1_epochs):
            total = 0.0
            for _ in range(n_batches):
                batch = pools.sample_batch(bs, self.sensitive_fraction, self.rng_)
                total += self._step(batch.X, batch.y)
            epoch_loss = total / n_batches
        return epoch_loss

    def train_phase2(self, negatives, sigma: Optional[float] = None, batch_size: Optional[int] = None) -> int:
        """Negative-only updates until negative recall reaches ``sigma``.

        Returns the number of batches used; ``phase2_converged_`` records
        whether the target was met before ``phase2_max_iters``.
        """
        negatives = check_observations(negatives)
        if not len(negatives):
            raise ValueError("phase two needs a non-empty negative pool")
        sigma = self.sigma if sigma is None else sigma
        if not 0 < sigma <= 1:
            raise ValueError("sigma must lie in (0, 1]")
        self._ensure_init(negatives.shape[1])
        bs = batch_size or self.batch_size
        zeros = np.zeros(bs)
        iters = 0
        while self.negative_recall(negatives) < sigma:
            if iters >= self.phase2_max_iters:
                self.phase2_converged_ = False
                return iters
            idx = self.rng_.integers(0, len(negatives), size=bs)
            self._step(negatives[idx], zeros)
            iters += 1
        self.phase2_converged_ = True
        return iters

    # ------------------------------------------------------------ inference

    def _proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_observations(X, self.n_features_in_)
        p = nn.forward(self.net_, X)[:, 0]
        return np.clip(p, nn.PROB_EPS, 1.0 - nn.PROB_EPS)

    def predict_proba(self, X) -> np.ndarray:
        p = self._proba(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self._proba(X) >= self.threshold).astype(int)

    def probability(self, obs) -> float:
        return float(self._proba(np.asarray(obs, dtype=float)[None, :])[0])

    def is_sufficient(self, obs) -> bool:
        return self.probability(obs) >= self.threshold

    def negative_recall(self, negatives) -> float:
        """Fraction of negative states predicted below the threshold."""
        negatives = np.asarray(negatives, dtype=float)
        if not len(negatives):
            return 0.0
        return float(np.mean(self._proba(negatives) < self.threshold))

    def flag_rounds(self, rounds: Sequence[Round]) -> List[np.ndarray]:
        if not rounds:
            return []
        flags = self.predict(np.concatenate([np.stack(r.states) for r in rounds])).astype(bool)
        out, i = [], 0
        for r in rounds:
            out.append(flags[i:i + len(r)])
            i += len(r)
        return out

    def evaluate(self, rounds: Sequence[Round], negatives=None) -> EsceMetrics:
        """Round-level metrics; negative recall uses ``negatives`` or the negative rounds."""
        flags = self.flag_rounds(rounds)
        if negatives is None:
            neg = [r.states for r in rounds if not r.positive]
            negatives = np.concatenate([np.stack(s) for s in neg]) if neg else np.zeros((0, 1))
        recall_neg = self.negative_recall(negatives) if len(negatives) else 0.0
        return round_metrics(flags, [r.positive for r in rounds], recall_neg)

    def calibrate(self, obs, cal: CalibrationState, signal: EnvSignal):
        """Calibrated reward for ``obs`` under the once-per-round rule.

        ``signal`` is the signal received on the step taken from ``obs``; any
        non-null signal starts a new round after the reward is decided.
        """
        reward = 0.0
        if not cal.rewarded_this_round and self.is_sufficient(obs):
            reward = cal.calibrated_magnitude
            cal = replace(cal, rewarded_this_round=True)
        if not signal.is_null:
            cal = replace(cal, rewarded_this_round=False)
        return reward, cal

    def new_calibration(self) -> CalibrationState:
        return CalibrationState(False, float(self.calibrated_magnitude))

    def snapshot(self) -> "EsceClassifier":
        """Frozen copy for rollout workers."""
        return copy.deepcopy(self)
