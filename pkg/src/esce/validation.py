"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .nn import ShapeError


def check_observations(X, n_features=None) -> np.ndarray:
    """2-D finite float array of observations, optionally of a fixed width."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2 and X.shape[0] == 0:
        return X
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def check_labels(y, n) -> np.ndarray:
    y = np.asarray(y).ravel()
    if y.shape[0] != n:
        raise ValueError(f"got {y.shape[0]} labels for {n} samples")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (negative) or 1 (positive)")
    return y.astype(int)

