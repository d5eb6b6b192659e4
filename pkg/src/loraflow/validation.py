"""Input validation for IQ arrays.

``sklearn.utils.check_array`` refuses complex input, so estimators go
through :func:`check_iq` instead. It accepts complex arrays of shape
``(n_signals, n_samples)`` or real arrays with a trailing I/Q axis of size 2.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .exceptions import NumericError, ShapeError


def check_iq(X, n_samples: Optional[int] = None, ensure_2d: bool = True) -> np.ndarray:
    X = np.asarray(X)
    if not np.iscomplexobj(X):
        if X.ndim >= 1 and X.shape[-1] == 2 and X.dtype.kind in "fiu":
            X = X[..., 0].astype(np.float64) + 1j * X[..., 1].astype(np.float64)
        else:
            raise ShapeError("expected complex IQ samples or a trailing (I, Q) axis of size 2")
    X = X.astype(np.complex128, copy=False)
    if ensure_2d and X.ndim == 1:
        raise ShapeError("expected a 2-D array of signals; reshape a single buffer with X[None]")
    if ensure_2d and X.ndim != 2:
        raise ShapeError(f"expected 2-D IQ array, got shape {X.shape}")
    if n_samples is not None and X.shape[-1] != n_samples:
        raise ShapeError(f"expected {n_samples} samples per signal, got {X.shape[-1]}")
    if not np.all(np.isfinite(X)):
        raise NumericError("IQ input contains NaN or Inf")
    return X


def check_labels(y, n_signals: int, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_signals,):
        raise ShapeError(f"expected {n_signals} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise ShapeError("labels must be integers")
        y = y.astype(np.int64)
    if np.any((y < 0) | (y >= n_classes)):
        raise ShapeError(f"labels must lie in [0, {n_classes})")
    return y
