"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numbers

import numpy as np

__all__ = ["check_sequences", "check_labels", "check_generator", "check_positive_int"]


def check_sequences(X, min_frames: int = 1, n_features: int | None = None) -> np.ndarray:
    """Return ``X`` as a finite float64 (N, F, D) array; a single (F, D) sequence is promoted."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected sequences of shape (N, F, D), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("no sequences given")
    if arr.shape[1] < min_frames:
        raise ValueError(f"sequences need at least {min_frames} frames, got {arr.shape[1]}")
    if n_features is not None and arr.shape[2] != n_features:
        raise ValueError(f"expected {n_features} features per frame, got {arr.shape[2]}")
    if not np.isfinite(arr).all():
        raise ValueError("sequences contain NaN or inf")
    return arr


def check_labels(y, n: int, n_labels: int | None = None) -> np.ndarray:
    """Integer labels, one per sequence; ``None`` means every sequence has label 0."""
    if y is None:
        return np.zeros(n, dtype=np.int64)
    raw = np.asarray(y)
    if raw.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {raw.shape}")
    if raw.size and not np.all(np.equal(np.mod(raw, 1), 0)):
        raise ValueError("labels must be integers")
    labels = raw.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    if n_labels is not None and labels.size and labels.max() >= n_labels:
        raise ValueError(f"label {labels.max()} out of range for {n_labels} classes")
    return labels


def check_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise TypeError(f"cannot build a random generator from {type(seed).__name__}")


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
