"""Input checks shared by the estimator wrappers and the command line."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .exceptions import DataError, ShapeError

__all__ = ["check_segments", "check_paired_segments", "check_fitted_model"]


def check_segments(X, T: Optional[int] = None, name: str = "X") -> np.ndarray:
    """Coerce to a finite float64 (n_segments, T) array.

    A single 1-D segment is promoted to one row; a (n, 1, T) array is squeezed.
    """
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    elif X.ndim == 3 and X.shape[1] == 1:
        X = X[:, 0, :]
    try:
        X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    except ValueError as e:
        raise DataError(f"{name}: {e}") from None
    if T is not None and X.shape[1] != T:
        raise ShapeError(f"{name}: segment length {X.shape[1]} does not match T={T}")
    return X


def check_paired_segments(X, y, T: Optional[int] = None):
    X = check_segments(X, T, "X")
    y = check_segments(y, T, "y")
    if X.shape != y.shape:
        raise ShapeError(f"X {X.shape} and y {y.shape} must have identical shapes")
    return X, y


def check_fitted_model(estimator, attr: str = "model_"):
    if getattr(estimator, attr, None) is None:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first")
    return getattr(estimator, attr)
