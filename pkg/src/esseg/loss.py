"""Distance-based class posteriors and the sampled cross-entropy.

Logits are negative squared distances between pixel embeddings and table
rows, scaled by a temperature. The exact posterior normalizes over all C
classes; the sampled variant normalizes only over each pixel's ground-truth
class plus a small set of mined classes, which is what makes training with
huge class counts affordable. At the temperatures used in practice the raw
exponent range is enormous, so every softmax here goes through a
log-sum-exp shift.

Gradients are computed analytically (no autodiff): softmax-cross-entropy at
the logits, the distance kernel's chain rule back to pixels and table rows,
and optionally the normalization Jacobian back to raw pixel activations.
Class-row selection is a detached operation and receives no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .embeddings import max_margin_loss, table_rows
from .errors import EmptyBatchError
from .knn import TargetRows, knn_with_target
from .validation import (
    IGNORE_LABEL,
    as_label_vector,
    check_labels_in_range,
    check_positive,
)

SAMPLING_MODES = ("knn", "random", "exact")


@dataclass
class LossReport:
    """Loss values plus analytic gradients for one batch.

    grad_pixels has one row per input pixel (zero for ignore-labelled
    pixels); grad_table covers every class row, including the max-margin
    term when a margin is configured.
    """

    classification_loss: float
    regularization_loss: float
    total: float
    grad_pixels: np.ndarray
    grad_table: np.ndarray
    pixels_counted: int


def _softmax_rows(logits: np.ndarray):
    """Row-wise stable softmax for logit rows that may contain -inf padding.

    Returns (probs, logsumexp); padded entries come back as exact zeros.
    """
    peak = np.max(logits, axis=1, keepdims=True)
    shifted = np.exp(logits - peak)
    total = np.sum(shifted, axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(total[:, 0])
    return shifted / total, lse


def exact_posterior(x, table, tau: float) -> np.ndarray:
    """Softmax over all classes of -||x - row||^2 / tau.

    Accepts a single d-vector (returns shape (C,)) or an (N, d) batch
    (returns (N, C)). Rows sum to 1 up to round-off.
    """
    check_positive("tau", tau)
    rows = table_rows(table)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    logits = -geometry.pairwise_sq_dists(np.atleast_2d(x), rows) / tau
    probs, _ = _softmax_rows(logits)
    return probs[0] if single else probs


def approx_posterior(x, table, tau: float, neighbor_row) -> float:
    """Target probability from a softmax restricted to `neighbor_row`.

    `neighbor_row` lists class indices with the ground-truth class at
    position 0. Restricting the denominator can only drop positive terms, so
    the result upper-bounds the exact target posterior and is monotonically
    non-increasing as the row grows.
    """
    check_positive("tau", tau)
    rows = table_rows(table)
    row = np.asarray(neighbor_row, dtype=np.int64)
    if row.ndim != 1 or row.size == 0:
        raise ValueError("neighbor_row must be a non-empty 1-d index array")
    if np.any(row < 0) or np.any(row >= rows.shape[0]):
        raise ValueError("neighbor_row contains out-of-range class indices")
    x = np.asarray(x, dtype=np.float64)
    diffs = x[None, :] - rows[row]
    logits = -np.einsum("wd,wd->w", diffs, diffs) / tau
    peak = logits.max()
    weights = np.exp(logits - peak)
    return float(weights[0] / weights.sum())


def gradient_of_logits(probs, target_position: int = 0) -> np.ndarray:
    """Softmax-cross-entropy gradient at the logits: probs minus one-hot."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("probs must be 1-d")
    if not 0 <= target_position < probs.size:
        raise ValueError(f"target_position {target_position} out of range")
    grad = probs.copy()
    grad[target_position] -= 1.0
    return grad


def _random_rows(num_classes: int, labels: np.ndarray, k: int,
                 rng: np.random.Generator) -> TargetRows:
    """Target plus k distinct uniformly drawn non-target classes per pixel."""
    if not 1 <= k <= num_classes - 1:
        raise ValueError(
            f"random sampling needs 1 <= k <= C-1, got k={k} with C={num_classes}"
        )
    n = labels.shape[0]
    out = np.full((n, k + 1), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    valid = labels != IGNORE_LABEL
    nv = int(valid.sum())
    if nv == 0:
        return TargetRows(out, lengths)
    keys = rng.random((nv, num_classes))
    keys[np.arange(nv), labels[valid]] = np.inf
    picked = np.argpartition(keys, k - 1, axis=1)[:, :k].astype(np.int64)
    block = np.concatenate([labels[valid][:, None], picked], axis=1)
    out[valid] = block
    lengths[valid] = k + 1
    return TargetRows(out, lengths)


def _exact_rows(num_classes: int, labels: np.ndarray) -> TargetRows:
    """Every class per pixel, target first then the rest in ascending order."""
    n = labels.shape[0]
    out = np.full((n, num_classes), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    valid = labels != IGNORE_LABEL
    nv = int(valid.sum())
    if nv == 0:
        return TargetRows(out, lengths)
    vy = labels[valid]
    allc = np.tile(np.arange(num_classes, dtype=np.int64), (nv, 1))
    dup = allc == vy[:, None]
    order = np.argsort(dup, axis=1, kind="stable")
    rest = np.take_along_axis(allc, order, axis=1)[:, : num_classes - 1]
    out[valid] = np.concatenate([vy[:, None], rest], axis=1)
    lengths[valid] = num_classes
    return TargetRows(out, lengths)


def loss_compute(pixels, labels, table, tau: float, k: int, margin: float | None = None,
                 *, mode: str = "knn", dedup: bool = True, normalize_pixels: bool = True,
                 reduction: str = "mean", rng: np.random.Generator | None = None,
                 neighbor_rows: TargetRows | None = None, margin_one_sided: bool = False,
                 n_threads: int = 1) -> LossReport:
    """Sampled cross-entropy over mined class rows, plus analytic gradients.

    Pipeline: (optionally) normalize the pixel vectors, pick each pixel's
    class row (`mode` one of "knn" for nearest classes, "random" for uniform
    negatives, "exact" for all classes; or pass `neighbor_rows` to reuse a
    precomputed selection), softmax the restricted distance logits, and take
    the negative log of the target entry. The classification term is the
    mean over labelled pixels (or the sum with reduction="sum"); `margin`
    adds the nearest-neighbour hinge on the table.

    Row selection is detached: gradients flow through the logits only, never
    through which classes were picked. grad_pixels is the gradient with
    respect to the `pixels` argument as given, so it includes the
    normalization Jacobian when `normalize_pixels` is on.
    """
    check_positive("tau", tau)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if mode not in SAMPLING_MODES:
        raise ValueError(f"mode must be one of {SAMPLING_MODES}, got {mode!r}")

    rows = table_rows(table)
    num_classes, dim = rows.shape
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"pixels must be (N, {dim}), got shape {x.shape}")
    labels = as_label_vector(labels)
    if labels.shape[0] != x.shape[0]:
        raise ValueError(f"got {x.shape[0]} pixels but {labels.shape[0]} labels")
    check_labels_in_range(labels, num_classes)

    xn = geometry.normalize_rows(x) if normalize_pixels else x

    if neighbor_rows is not None:
        sel = neighbor_rows
        if sel.indices.shape[0] != x.shape[0]:
            raise ValueError("neighbor_rows does not match the pixel count")
    elif mode == "knn":
        sel = knn_with_target(rows, xn, labels, k, dedup=dedup, n_threads=n_threads)
    elif mode == "random":
        if rng is None:
            raise ValueError("mode='random' needs an rng")
        sel = _random_rows(num_classes, labels, k, rng)
    else:
        sel = _exact_rows(num_classes, labels)

    valid = sel.lengths > 0
    counted = int(valid.sum())
    if counted == 0:
        raise EmptyBatchError("no labelled pixels in the batch")

    idx = sel.indices[valid]
    pad = np.arange(sel.width)[None, :] >= sel.lengths[valid][:, None]
    safe_idx = np.where(pad, 0, idx)
    gathered = rows[safe_idx]                                # (Nv, W, d)
    diffs = xn[valid][:, None, :] - gathered                 # (Nv, W, d)
    logits = -np.einsum("nwd,nwd->nw", diffs, diffs) / tau
    logits[pad] = -np.inf
    probs, lse = _softmax_rows(logits)

    per_pixel = lse - logits[:, 0]
    weight = 1.0 / counted if reduction == "mean" else 1.0
    cls_loss = float(per_pixel.sum() * weight)

    glogits = probs.copy()
    glogits[:, 0] -= 1.0
    glogits *= weight

    grad_xn_valid = (-2.0 / tau) * np.einsum("nw,nwd->nd", glogits, diffs)
    grad_table = np.zeros_like(rows)
    keep = ~pad
    np.add.at(grad_table, safe_idx[keep],
              (2.0 / tau) * glogits[keep][:, None] * diffs[keep])

    grad_xn = np.zeros_like(xn)
    grad_xn[valid] = grad_xn_valid
    if normalize_pixels:
        grad_pixels = geometry.normalize_rows_backward(x, grad_xn)
    else:
        grad_pixels = grad_xn

    reg_loss = 0.0
    if margin is not None:
        reg_loss, grad_margin = max_margin_loss(rows, margin, one_sided=margin_one_sided)
        grad_table += grad_margin

    return LossReport(
        classification_loss=cls_loss,
        regularization_loss=float(reg_loss),
        total=cls_loss + float(reg_loss),
        grad_pixels=grad_pixels,
        grad_table=grad_table,
        pixels_counted=counted,
    )


def exact_cross_entropy(pixels, labels, table, tau: float,
                        normalize_pixels: bool = True, chunk: int = 4096) -> float:
    """Mean full-softmax cross-entropy over labelled pixels (no gradients).

    Works from the (N, C) logit matrix directly, chunked over pixels, so it
    stays cheap enough to run on a whole dataset between epochs.
    """
    check_positive("tau", tau)
    rows = table_rows(table)
    x = np.asarray(pixels, dtype=np.float64)
    labels = as_label_vector(labels)
    if labels.shape[0] != x.shape[0]:
        raise ValueError(f"got {x.shape[0]} pixels but {labels.shape[0]} labels")
    check_labels_in_range(labels, rows.shape[0])
    valid = labels != IGNORE_LABEL
    if not np.any(valid):
        raise EmptyBatchError("no labelled pixels in the batch")
    xv = geometry.normalize_rows(x[valid]) if normalize_pixels else x[valid]
    yv = labels[valid]
    total = 0.0
    for start in range(0, xv.shape[0], chunk):
        xs = xv[start:start + chunk]
        ys = yv[start:start + chunk]
        logits = -geometry.pairwise_sq_dists(xs, rows) / tau
        peak = logits.max(axis=1)
        lse = peak + np.log(np.exp(logits - peak[:, None]).sum(axis=1))
        total += float((lse - logits[np.arange(xs.shape[0]), ys]).sum())
    return total / xv.shape[0]
