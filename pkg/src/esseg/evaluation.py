"""Prediction, segmentation metrics, memory accounting, and analyses of a
trained class-embedding table."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .embeddings import EmbeddingTable, table_rows
from .errors import NumericalError
from .validation import IGNORE_LABEL, as_label_vector


def predict_labels(pixels, table, chunk: int = 8192) -> np.ndarray:
    """Nearest table row per pixel; distance ties go to the lowest class index."""
    rows = table_rows(table)
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != rows.shape[1]:
        raise ValueError(f"pixels must be (N, {rows.shape[1]}), got shape {pixels.shape}")
    out = np.empty(pixels.shape[0], dtype=np.int64)
    for start in range(0, pixels.shape[0], chunk):
        d2 = geometry.pairwise_sq_dists(pixels[start:start + chunk], rows)
        out[start:start + chunk] = np.argmin(d2, axis=1)
    return out


class ConfusionMatrix:
    """C x C counts, ground truth on rows and predictions on columns.

    Ignore-labelled pixels are excluded at update time. Updates from disjoint
    shards commute, so matrices can be merged with `+`.
    """

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes):
                raise ValueError(f"counts must be ({num_classes}, {num_classes})")
            if np.any(counts < 0):
                raise ValueError("counts must be non-negative")
            counts = counts.copy()
        self.counts = counts

    def update(self, ground_truth, predictions) -> "ConfusionMatrix":
        gt = as_label_vector(ground_truth, "ground_truth")
        pred = as_label_vector(predictions, "predictions")
        if gt.shape != pred.shape:
            raise ValueError("ground truth and predictions differ in length")
        keep = gt != IGNORE_LABEL
        gt, pred = gt[keep], pred[keep]
        if np.any(gt >= self.num_classes) or np.any(pred >= self.num_classes) \
                or np.any(pred == IGNORE_LABEL):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        flat = np.bincount(gt * self.num_classes + pred,
                           minlength=self.num_classes ** 2)
        self.counts += flat.reshape(self.num_classes, self.num_classes)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def compute_metrics(cm: ConfusionMatrix) -> dict:
    """Pixel accuracy, mean IoU, and frequency-weighted IoU from counts.

    Per-class IoU is TP / (TP + FP + FN). Classes absent from both ground
    truth and predictions have an undefined IoU; they are reported as None
    and excluded from the mean. fwIoU weights each class IoU by its
    ground-truth frequency, so absent classes contribute zero weight.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts)
    gt_per_class = counts.sum(axis=1)
    pred_per_class = counts.sum(axis=0)
    union = gt_per_class + pred_per_class - tp
    defined = union > 0
    iou = np.zeros_like(tp)
    iou[defined] = tp[defined] / union[defined]
    freq = gt_per_class / total
    return {
        "pacc": float(tp.sum() / total),
        "miou": float(iou[defined].mean()),
        "fwiou": float((freq[defined] * iou[defined]).sum()),
        "per_class": [float(v) if d else None for v, d in zip(iou, defined)],
    }


@dataclass
class MemoryEstimate:
    """Activation-memory bookkeeping for the classifier head.

    A conventional head materializes a per-pixel score per class
    (B*H*W*C scalars); the embedding head materializes B*H*W*d scalars plus
    the C*d table. `output_ratio` compares the per-pixel outputs alone
    (exactly C/d); `ratio` charges the table to the embedding side too.
    """

    baseline_output_bytes: int
    ours_output_bytes: int
    table_bytes: int
    output_ratio: float
    ratio: float
    assumptions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "baseline_output_bytes": self.baseline_output_bytes,
            "ours_output_bytes": self.ours_output_bytes,
            "table_bytes": self.table_bytes,
            "output_ratio": self.output_ratio,
            "ratio": self.ratio,
            "assumptions": dict(self.assumptions),
        }


def memory_estimate(batch: int, height: int, width: int, num_classes: int,
                    dim: int, bytes_per_scalar: int = 4) -> MemoryEstimate:
    for name, value in (("batch", batch), ("height", height), ("width", width),
                        ("num_classes", num_classes), ("dim", dim),
                        ("bytes_per_scalar", bytes_per_scalar)):
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    pixels = batch * height * width
    baseline = pixels * num_classes * bytes_per_scalar
    ours = pixels * dim * bytes_per_scalar
    table = num_classes * dim * bytes_per_scalar
    return MemoryEstimate(
        baseline_output_bytes=baseline,
        ours_output_bytes=ours,
        table_bytes=table,
        output_ratio=baseline / ours,
        ratio=baseline / (ours + table),
        assumptions={
            "batch": batch, "height": height, "width": width,
            "num_classes": num_classes, "dim": dim,
            "bytes_per_scalar": bytes_per_scalar,
        },
    )


def agglomerative_cluster(table, linkage: str = "average") -> list:
    """Bottom-up clustering of table rows under Euclidean distance.

    Returns the merge list as dicts {a, b, height, size}: leaves are numbered
    0..C-1 and merge step t creates cluster C+t, mirroring the usual linkage
    convention. Average linkage updates distances by cluster-size-weighted
    means (Lance-Williams), which keeps merge heights non-decreasing. Ties,
    both in distance and in pair choice, resolve to the lexicographically
    smallest active pair, so the output is deterministic.
    """
    if linkage != "average":
        raise ValueError(f"only 'average' linkage is supported, got {linkage!r}")
    rows = table_rows(table)
    c = rows.shape[0]
    dist = np.sqrt(geometry.pairwise_sq_dists(rows, rows))
    np.fill_diagonal(dist, np.inf)
    dist[np.tril_indices(c)] = np.inf  # keep the upper triangle only
    sizes = np.ones(c)
    ids = np.arange(c)
    alive = np.ones(c, dtype=bool)
    merges = []
    for step in range(c - 1):
        flat = int(np.argmin(dist))
        i, j = divmod(flat, c)
        height = float(dist[i, j])
        a, b = int(ids[i]), int(ids[j])
        new_size = sizes[i] + sizes[j]
        merges.append({"a": min(a, b), "b": max(a, b),
                       "height": height, "size": int(new_size)})
        # Fold cluster j into slot i with the average-linkage update.
        others = alive.copy()
        others[i] = others[j] = False
        di = np.where(np.arange(c) < i, dist[:, i], dist[i, :])
        dj = np.where(np.arange(c) < j, dist[:, j], dist[j, :])
        merged = (sizes[i] * di + sizes[j] * dj) / new_size
        lo, hi = np.arange(c) < i, np.arange(c) > i
        dist[lo & others, i] = merged[lo & others]
        dist[i, hi & others] = merged[hi & others]
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        alive[j] = False
        sizes[i] = new_size
        ids[i] = c + step
    return merges


def norm_frequency_correlation(table, frequencies) -> float:
    """Pearson correlation between row norms and per-class frequencies.

    Degenerate input (either variable constant) has no defined correlation
    and raises rather than returning NaN; a unit-normalized table therefore
    always raises.
    """
    rows = table_rows(table)
    freqs = np.asarray(frequencies, dtype=np.float64)
    if freqs.shape != (rows.shape[0],):
        raise ValueError(
            f"frequencies must have one entry per class ({rows.shape[0]}), got shape {freqs.shape}"
        )
    if not np.all(np.isfinite(freqs)):
        raise ValueError("frequencies contain non-finite values")
    declared_unit = isinstance(table, EmbeddingTable) and table.normalized
    norms = np.linalg.norm(rows, axis=1)
    # norms within rounding error of constant (e.g. a projected table, even
    # after a float32 round trip) carry no signal; correlating the residual
    # jitter would return pure noise
    degenerate = np.ptp(norms) <= 1e-5 * max(1.0, float(np.abs(norms).max()))
    if declared_unit or degenerate or np.ptp(freqs) == 0.0:
        raise NumericalError("correlation undefined: zero variance in norms or frequencies")
    nc = norms - norms.mean()
    fc = freqs - freqs.mean()
    return float((nc @ fc) / np.sqrt((nc @ nc) * (fc @ fc)))
