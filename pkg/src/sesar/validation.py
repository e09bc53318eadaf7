"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array


def check_sequences(X, min_length: int = 1) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape (n, T, F)."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_min_samples=0,
                    ensure_min_features=0, ensure_all_finite=True)
    if X.ndim != 3:
        raise ValueError(f"expected sequences of shape (n_samples, T, n_features), got {X.shape}")
    if X.shape[1] < min_length:
        raise ValueError(f"sequences need at least {min_length} frames, got {X.shape[1]}")
    return X


def check_partial_labels(y, n_samples: int, n_classes: int | None = None) -> np.ndarray:
    """Integer labels with -1 marking unlabeled samples."""
    if y is None:
        return np.full(n_samples, -1, dtype=int)
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValueError(f"y must have shape ({n_samples},), got {y.shape}")
    if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
        raise ValueError("labels must be integers")
    y = y.astype(int)
    if np.any(y < -1):
        raise ValueError("labels must be >= 0, or -1 for unlabeled")
    if n_classes is not None and np.any(y >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    return y


def check_probabilities(P, atol: float = 1e-9) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    if P.ndim != 2 or np.any(P < 0) or not np.all(np.isfinite(P)):
        raise ValueError("probabilities must be a finite non-negative (n, C) array")
    if not np.allclose(P.sum(axis=1), 1.0, rtol=0, atol=atol):
        raise ValueError("probability rows must sum to 1")
    return P
