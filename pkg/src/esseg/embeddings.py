"""The learned class-embedding table.

One d-dimensional row per class. Rows live on the unit sphere by default
(the trainer re-projects them after every step); a max-margin hinge keeps
neighbouring rows from collapsing onto each other. Tables serialize to a
small binary format so trained checkpoints can be inspected offline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import BadMagicError, FormatError, TruncatedFileError

ESSE_MAGIC = b"ESSE"
ESSE_VERSION = 1
_ESSE_HEADER = struct.Struct("<4sIII")

# A loaded table is flagged as normalized when every row norm is within this
# tolerance of 1 (single-precision storage perturbs norms slightly).
UNIT_NORM_ATOL = 1e-6

# Below this separation a nearest-neighbour pair is treated as coincident and
# contributes a zero subgradient (the distance is not differentiable at 0).
_COINCIDENT_EPS = 1e-12


@dataclass
class EmbeddingTable:
    """Class-embedding matrix with shape (num_classes, dim), float64."""

    rows: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError(f"table rows must be 2-d, got shape {rows.shape}")
        if rows.shape[0] < 2:
            raise ValueError("a table needs at least 2 classes")
        if rows.shape[1] < 1:
            raise ValueError("embedding dimension must be >= 1")
        if not np.all(np.isfinite(rows)):
            raise ValueError("table rows contain non-finite values")
        self.rows = rows

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.rows.copy(), normalized=self.normalized)


def table_rows(table) -> np.ndarray:
    """Accept either an EmbeddingTable or a bare (C, d) array."""
    if isinstance(table, EmbeddingTable):
        return table.rows
    rows = np.asarray(table, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError(f"expected an EmbeddingTable or (C, d) array, got shape {rows.shape}")
    return rows


def init_table(num_classes: int, dim: int, seed: int, normalize: bool = True) -> EmbeddingTable:
    """Draw standard-normal rows, optionally projected onto the unit sphere.

    With `normalize=False` the raw draws are kept (row norms ~ sqrt(dim)),
    which is the starting point for the no-normalization ablation.
    """
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((num_classes, dim))
    if normalize:
        rows = geometry.normalize_rows(rows)
    return EmbeddingTable(rows, normalized=normalize)


def nearest_inter_class_distances(table):
    """Per row, the Euclidean distance to the closest *other* row.

    Returns `(dists, nearest)` where `nearest[i]` is the index of the row
    attaining `dists[i]`. Distance ties resolve to the lowest index so the
    result is deterministic.
    """
    rows = table_rows(table)
    d2 = geometry.pairwise_sq_dists(rows, rows)
    np.fill_diagonal(d2, np.inf)
    nearest = np.argmin(d2, axis=1)
    dists = np.sqrt(d2[np.arange(rows.shape[0]), nearest])
    return dists, nearest


def max_margin_loss(table, margin: float, one_sided: bool = False):
    """Hinge penalty on nearest-neighbour row separation, with subgradient.

    loss = (1/C) * sum_i max(0, margin - d_i) where d_i is row i's distance
    to its nearest other row. The subgradient treats each row's
    nearest-neighbour pairing as fixed; at argmin ties the lowest index wins,
    and a coincident pair (d_i = 0) contributes zero. By default both rows of
    an active pair repel each other; `one_sided=True` moves only row i and
    leaves its neighbour untouched.

    Returns `(loss, grad)` with `grad` shaped like the table rows.
    """
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    rows = table_rows(table)
    num_classes = rows.shape[0]
    dists, nearest = nearest_inter_class_distances(rows)
    slack = margin - dists
    loss = float(np.maximum(slack, 0.0).sum() / num_classes)

    grad = np.zeros_like(rows)
    active = (slack > 0.0) & (dists > _COINCIDENT_EPS)
    if np.any(active):
        idx = np.nonzero(active)[0]
        nbr = nearest[idx]
        unit = (rows[idx] - rows[nbr]) / dists[idx, None]
        # d(margin - d_i)/d(row_i) = -unit, and +unit for the neighbour.
        np.add.at(grad, idx, -unit / num_classes)
        if not one_sided:
            np.add.at(grad, nbr, unit / num_classes)
    return loss, grad


def save_embeddings(table: EmbeddingTable, path) -> None:
    """Write a table as magic, version, C, d (little-endian u32) then C*d float32 rows."""
    rows = table_rows(table)
    header = _ESSE_HEADER.pack(ESSE_MAGIC, ESSE_VERSION, rows.shape[0], rows.shape[1])
    payload = np.ascontiguousarray(rows, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_embeddings(path) -> EmbeddingTable:
    """Read a table written by `save_embeddings`, validating the header."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _ESSE_HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the fixed header")
    magic, version, num_classes, dim = _ESSE_HEADER.unpack_from(blob)
    if magic != ESSE_MAGIC:
        raise BadMagicError(f"{path}: expected magic {ESSE_MAGIC!r}, found {magic!r}")
    if version != ESSE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _ESSE_HEADER.size + 4 * num_classes * dim
    if len(blob) < expected:
        raise TruncatedFileError(
            f"{path}: header declares {num_classes}x{dim} rows but the payload is short"
        )
    if len(blob) > expected:
        raise FormatError(f"{path}: {len(blob) - expected} trailing bytes after the payload")
    raw = np.frombuffer(blob, dtype="<f4", offset=_ESSE_HEADER.size)
    rows = raw.reshape(num_classes, dim).astype(np.float64)
    norms = np.linalg.norm(rows, axis=1)
    normalized = bool(np.all(np.abs(norms - 1.0) <= UNIT_NORM_ATOL))
    return EmbeddingTable(rows, normalized=normalized)
