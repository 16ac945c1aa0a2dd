"""Input validation helpers used at the public API boundary."""

from __future__ import annotations

import numpy as np

# Sentinel for unlabelled pixels. In memory labels are int64 and the sentinel
# is -1 (the all-ones bit pattern); on disk labels are uint32 and the sentinel
# is 0xFFFFFFFF (likewise all ones).
IGNORE_LABEL = -1


def as_float_matrix(x, name: str, dtype=np.float64) -> np.ndarray:
    """Coerce to a 2-d float array, rejecting non-finite entries."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_label_vector(y, name: str = "labels") -> np.ndarray:
    """Coerce to a 1-d int64 label vector. Values must be >= 0 or the ignore sentinel."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must be integers, got dtype {arr.dtype}")
    arr = arr.astype(np.int64)
    bad = (arr < 0) & (arr != IGNORE_LABEL)
    if np.any(bad):
        raise ValueError(f"{name} contains negative values other than the ignore sentinel")
    return arr


def check_labels_in_range(y: np.ndarray, num_classes: int, name: str = "labels") -> None:
    """Reject labels >= num_classes (the ignore sentinel is exempt)."""
    valid = y != IGNORE_LABEL
    if np.any(y[valid] >= num_classes):
        worst = int(y[valid].max())
        raise ValueError(f"{name} contains class {worst} but only {num_classes} classes exist")


def check_positive(name: str, value) -> None:
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive, got {value!r}")


def check_nonnegative(name: str, value) -> None:
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
