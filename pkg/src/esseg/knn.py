"""Exact nearest-class search over the embedding table.

The search feeds the sampled softmax, so results are plain integer indices
with no gradient attached. Queries may be partitioned across worker threads;
per-row results are independent of the partitioning, so any thread count
returns identical matrices.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import geometry
from .embeddings import table_rows
from .validation import IGNORE_LABEL, as_label_vector, check_labels_in_range

_CHUNK = 4096


@dataclass
class NeighborIndex:
    """indices[i, j] is the class with the (j+1)-th smallest distance to query i."""

    indices: np.ndarray  # (N, k) int64
    k: int


@dataclass
class TargetRows:
    """Per-pixel class rows for the sampled softmax: target first, then neighbours.

    `indices` is (N, width) int64 padded with -1 past each row's `lengths`
    entry. Rows for ignore-labelled pixels have length 0.
    """

    indices: np.ndarray
    lengths: np.ndarray

    @property
    def width(self) -> int:
        return self.indices.shape[1]


def _knn_chunk(rows: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    d2 = geometry.pairwise_sq_dists(queries, rows)
    # A stable sort turns equal distances into ascending-index order, which is
    # the documented tie rule.
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def knn_search(table, queries, k: int, n_threads: int = 1) -> NeighborIndex:
    """Exact k-nearest rows for each query, ties broken by ascending class index."""
    rows = table_rows(table)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != rows.shape[1]:
        raise ValueError(
            f"queries must be (N, {rows.shape[1]}), got shape {queries.shape}"
        )
    num_classes = rows.shape[0]
    if not 1 <= k <= num_classes:
        raise ValueError(f"k must be in [1, {num_classes}], got {k}")
    if n_threads < 1:
        raise ValueError(f"n_threads must be >= 1, got {n_threads}")

    n = queries.shape[0]
    if n == 0:
        return NeighborIndex(np.empty((0, k), dtype=np.int64), k)
    bounds = list(range(0, n, _CHUNK)) + [n]
    chunks = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
    if n_threads == 1 or len(chunks) == 1:
        parts = [_knn_chunk(rows, queries[a:b], k) for a, b in chunks]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(lambda ab: _knn_chunk(rows, queries[ab[0]:ab[1]], k), chunks))
    return NeighborIndex(np.concatenate(parts, axis=0), k)


def knn_with_target(table, queries, labels, k: int, dedup: bool = True,
                    n_threads: int = 1) -> TargetRows:
    """Class rows for the sampled softmax: the ground-truth class plus the k
    nearest classes to each query.

    With `dedup=True` (the default) the row is the set union with the target
    moved to position 0: length k when the target is already among the k
    nearest, else k+1. With `dedup=False` the target is literally prepended,
    so rows always have length k+1 and may contain the target twice; that
    reproduces plain concatenation for ablations. Ignore-labelled pixels get
    an empty row either way.
    """
    rows = table_rows(table)
    labels = as_label_vector(labels)
    check_labels_in_range(labels, rows.shape[0])
    queries = np.asarray(queries, dtype=np.float64)
    if queries.shape[0] != labels.shape[0]:
        raise ValueError(
            f"got {queries.shape[0]} queries but {labels.shape[0]} labels"
        )

    base = knn_search(rows, queries, k, n_threads=n_threads).indices
    n = labels.shape[0]
    width = k + 1
    out = np.full((n, width), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    valid = labels != IGNORE_LABEL
    if not np.any(valid):
        return TargetRows(out, lengths)

    vb = base[valid]
    vy = labels[valid]
    out_v = np.full((vb.shape[0], width), -1, dtype=np.int64)
    out_v[:, 0] = vy
    if dedup:
        dup = vb == vy[:, None]
        # Stable sort on the duplicate mask keeps non-target neighbours in
        # distance order and pushes the duplicate (if any) to the end, where
        # it falls outside the row length.
        order = np.argsort(dup, axis=1, kind="stable")
        out_v[:, 1:] = np.take_along_axis(vb, order, axis=1)
        len_v = np.where(dup.any(axis=1), k, k + 1)
        pad = np.arange(width)[None, :] >= len_v[:, None]
        out_v[pad] = -1
    else:
        out_v[:, 1:] = vb
        len_v = np.full(vb.shape[0], k + 1, dtype=np.int64)
    out[valid] = out_v
    lengths[valid] = len_v
    return TargetRows(out, lengths)
