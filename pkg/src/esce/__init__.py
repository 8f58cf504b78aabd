"""Calibrated rewards from an empirical sufficient condition extractor."""

from .envs import EnvConfig, EnvSignal, StepResult, make_env, sufficiency_oracle
from .extractor import CalibrationState, EsceClassifier, EsceMetrics
from .rounds import PoolSet, Round, segment

__all__ = [
    "CalibrationState",
    "EnvConfig",
    "EnvSignal",
    "EsceClassifier",
    "EsceMetrics",
    "PoolSet",
    "Round",
    "StepResult",
    "make_env",
    "segment",
    "sufficiency_oracle",
]
