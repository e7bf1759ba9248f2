"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import InputError, NotFittedError


def check_design(X, name="X"):
    try:
        X = check_array(X, dtype=np.float64, ensure_2d=True)
    except ValueError as exc:
        raise InputError(f"{name}: {exc}") from exc
    return X


def check_vector(y, n=None, name="y", dtype=np.float64):
    y = np.asarray(y, dtype=dtype)
    if y.ndim != 1:
        raise InputError(f"{name} must be one-dimensional")
    if n is not None and len(y) != n:
        raise InputError(f"{name} has length {len(y)}, expected {n}")
    if dtype is np.float64 and not np.all(np.isfinite(y)):
        raise InputError(f"{name} contains NaN or infinite values")
    return y


def check_probability(p, name="lambda"):
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise InputError(f"{name} must lie in [0, 1]")
    return p


def check_tuning_constant(c):
    if not np.isfinite(c) and c != np.inf:
        raise InputError("Huber constant must be a number")
    if c <= 0:
        raise InputError(f"Huber constant must be positive, got {c}")
    return float(c)


def check_tau(tau):
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise InputError(f"quantile order must lie in (0, 1), got {tau}")
    return tau


def check_is_fitted(estimator, attribute="fit_"):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )


def codes(labels):
    """Integer codes and sorted unique labels (stable for mixed label types)."""
    uniq, inv = np.unique(np.asarray(labels), return_inverse=True)
    return inv.astype(np.intp), uniq
