"""Unit-hypersphere primitives: normalization, its vector-Jacobian product,
and squared-distance kernels.

Everything here computes in float64 regardless of the input dtype; single
precision is reserved for storage formats. All functions are pure.
"""

from __future__ import annotations

import numpy as np

# Norms below this are treated as degenerate: the forward pass divides by the
# clamp instead of the true norm, and the backward pass returns zero.
DEFAULT_EPS = 1e-12


def normalize(v, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Project a single vector onto the unit sphere, v / max(||v||, eps)."""
    v = np.asarray(v, dtype=np.float64)
    return v / max(float(np.linalg.norm(v)), eps)


def normalize_rows(x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Row-wise `normalize` for an (N, d) matrix."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, eps)


def normalize_backward(v, upstream, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Vector-Jacobian product of `normalize` at v.

    For u = v / ||v|| the Jacobian is (I - u u^T) / ||v||, so the pullback of
    an upstream gradient g is (g - u (u . g)) / ||v||. Degenerate inputs
    (||v|| < eps) get a zero gradient: the clamped forward pass is locally
    constant in scale there and a huge 1/eps factor would poison training.
    """
    v = np.asarray(v, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if v.shape != upstream.shape:
        raise ValueError(f"shape mismatch: {v.shape} vs {upstream.shape}")
    n = float(np.linalg.norm(v))
    if n < eps:
        return np.zeros_like(v)
    u = v / n
    return (upstream - u * float(u @ upstream)) / n


def normalize_rows_backward(x, upstream, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Row-wise `normalize_backward` for (N, d) matrices."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {upstream.shape}")
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(norms, eps)
    u = x / safe
    out = (upstream - u * np.sum(u * upstream, axis=-1, keepdims=True)) / safe
    out[(norms < eps).ravel()] = 0.0
    return out


def sq_dist(a, b) -> float:
    """Squared Euclidean distance between two vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff)


def pairwise_sq_dists(queries, rows) -> np.ndarray:
    """All squared distances between (N, d) queries and (C, d) rows.

    Uses the ||q||^2 + ||r||^2 - 2 q.r expansion and clips tiny negative
    round-off at zero.
    """
    queries = np.asarray(queries, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    if queries.ndim != 2 or rows.ndim != 2:
        raise ValueError("pairwise_sq_dists expects 2-d arrays")
    if queries.shape[1] != rows.shape[1]:
        raise ValueError(
            f"dimension mismatch: queries have {queries.shape[1]} features, rows have {rows.shape[1]}"
        )
    q2 = np.einsum("nd,nd->n", queries, queries)[:, None]
    r2 = np.einsum("cd,cd->c", rows, rows)[None, :]
    out = q2 + r2 - 2.0 * (queries @ rows.T)
    np.maximum(out, 0.0, out=out)
    return out
