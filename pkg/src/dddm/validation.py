"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""
import numpy as np

from .exceptions import ParameterError

PROB_ATOL = 1e-9


def check_probabilities(P, atol=PROB_ATOL, name="probabilities"):
    """Validate an array whose last axis holds probability vectors.

    Returns the input as a float64 array.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 0 or P.shape[-1] < 1:
        raise ParameterError(f"{name} must have a nonempty last axis")
    if not np.isfinite(P).all():
        raise ParameterError(f"{name} contain non-finite entries")
    if (P < 0).any() or (P > 1).any():
        raise ParameterError(f"{name} must lie in [0, 1]")
    if np.abs(P.sum(axis=-1) - 1.0).max() > atol:
        raise ParameterError(f"{name} must sum to 1 within {atol:g}")
    return P


def check_trial(trial, n_classes=None):
    """Validate an ``(L, C)`` trial matrix."""
    trial = check_probabilities(trial, name="trial rows")
    if trial.ndim != 2 or trial.shape[0] < 1:
        raise ParameterError("a trial must be a nonempty (L, C) matrix")
    if n_classes is not None and trial.shape[1] != n_classes:
        raise ParameterError(f"trial has {trial.shape[1]} classes, expected {n_classes}")
    return trial


def check_threshold(A):
    if not 0.5 < A < 1:
        raise ParameterError(f"decision threshold must satisfy 0.5 < A < 1, got {A}")
    return float(A)


def check_rate(rate, name):
    if not 0 <= rate < 1:
        raise ParameterError(f"{name} must lie in [0, 1), got {rate}")
    return float(rate)


def check_inputs(X, n_features, name="X"):
    """Coerce to a float64 2-D array with ``n_features`` columns.

    A 1-D input is treated as a single example; ``was_1d`` tells the caller
    to squeeze the result back.
    """
    X = np.asarray(X, dtype=np.float64)
    was_1d = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ParameterError(f"{name} has shape {X.shape}, expected (n, {n_features})")
    return X, was_1d


def check_labels(y, n, n_classes=None):
    y = np.asarray(y)
    if y.ndim == 0:
        y = np.full(n, int(y))
    y = y.astype(np.int64)
    if y.shape != (n,):
        raise ParameterError(f"labels have shape {y.shape}, expected ({n},)")
    if n_classes is not None and ((y < 0).any() or (y >= n_classes).any()):
        raise ParameterError(f"labels must lie in [0, {n_classes})")
    return y
