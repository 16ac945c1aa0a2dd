"""SGD training of the extractor and the class-embedding table.

Two parameter groups with independent polynomial learning-rate schedules:
the extractor follows the main schedule, the table follows its own (slower
decay by default). Momentum is the classic buffer update v <- m*v + g,
p <- p - lr*v. When normalization is on, table rows are re-projected onto
the unit sphere after every step (projected gradient); a config switch
instead keeps raw rows and backpropagates through the row normalization,
which lets the two update geometries be A/B tested.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry
from .embeddings import (
    EmbeddingTable,
    init_table,
    load_embeddings,
    max_margin_loss,
    save_embeddings,
)
from .errors import EmptyBatchError, NumericalError
from .extractors import EXTRACTOR_KINDS, make_extractor
from .loss import LossReport, exact_cross_entropy, loss_compute
from .validation import (
    IGNORE_LABEL,
    as_float_matrix,
    as_label_vector,
    check_labels_in_range,
    check_positive,
)

TABLE_UPDATE_MODES = ("project", "jacobian")
# Weight-decayed parameter names; biases are exempt by convention.
_DECAY_KEYS = ("W", "W1", "W2")


@dataclass
class ScheduleConfig:
    """Polynomial decay: lr(t) = base_lr * (1 - t/total_iters)**power."""

    base_lr: float
    power: float
    total_iters: int
    momentum: float = 0.0

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.power < 0:
            raise ValueError(f"power must be >= 0, got {self.power}")
        if self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def lr_at(schedule: ScheduleConfig, iteration: int) -> float:
    """Learning rate at an iteration in [0, total_iters]; exactly 0 at the end."""
    if not 0 <= iteration <= schedule.total_iters:
        raise ValueError(
            f"iteration {iteration} outside [0, {schedule.total_iters}]"
        )
    frac = 1.0 - iteration / schedule.total_iters
    return schedule.base_lr * frac ** schedule.power


def sgd_step(params: dict, grads: dict, buffers: dict, lr: float, momentum: float,
             weight_decay: float = 0.0, decay_keys=None) -> None:
    """One in-place momentum-SGD step over a named parameter group.

    Weight decay is folded into the gradient for the listed keys (all keys
    when `decay_keys` is None). A zero learning rate freezes the group
    bitwise: nothing is touched, not even the momentum buffers. Non-finite
    gradients abort with a diagnostic naming the offending parameter.
    """
    if lr == 0.0:
        return
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        if weight_decay != 0.0 and (decay_keys is None or name in decay_keys):
            g = g + weight_decay * p
        buf = buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
            buffers[name] = buf
        buf *= momentum
        buf += g
        p -= lr * buf


@dataclass
class TrainSettings:
    """Hyperparameters for `train`. Defaults follow the reference recipe."""

    embed_dim: int = 16
    num_neighbors: int = 8
    temperature: float = 0.05
    margin: float = 0.2
    use_margin: bool = True
    normalize: bool = True
    dedup_targets: bool = True
    neg_sampling: str = "knn"          # "knn" | "random" | "exact"
    extractor: str = "linear"          # see extractors.EXTRACTOR_KINDS
    hidden_dim: int = 64
    epochs: int = 20
    batch_size: int = 512
    base_lr: float = 0.1
    lr_power: float = 0.9
    momentum: float = 0.9
    embed_lr: float | None = None      # defaults to base_lr
    embed_lr_power: float = 0.95
    embed_momentum: float = 0.95
    weight_decay: float = 1e-4
    reduction: str = "mean"
    table_update: str = "project"      # "project" | "jacobian"
    margin_one_sided: bool = False
    eval_every_epoch: bool = True
    seed: int = 0
    n_threads: int = 1

    def __post_init__(self):
        if self.neg_sampling not in ("knn", "random", "exact"):
            raise ValueError(f"unknown neg_sampling {self.neg_sampling!r}")
        if self.extractor not in EXTRACTOR_KINDS:
            raise ValueError(f"unknown extractor {self.extractor!r}")
        if self.table_update not in TABLE_UPDATE_MODES:
            raise ValueError(f"unknown table_update {self.table_update!r}")
        check_positive("temperature", self.temperature)
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        for name in ("embed_dim", "num_neighbors", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class TrainResult:
    table: EmbeddingTable
    extractor: object
    history: list          # rows of (iter, lr_main, lr_embed, cls_loss, reg_loss)
    epoch_metrics: list = field(default_factory=list)
    num_classes: int = 0
    settings: TrainSettings | None = None


def forward_backward(extractor, features, labels, table_rows_eff, settings: TrainSettings,
                     rng=None, neighbor_rows=None):
    """Extractor forward, sampled loss, and the full backward pass.

    Returns (LossReport, extractor param grads, input-feature grads). The
    report's grad_table is with respect to the effective (post-normalization)
    table rows; the optimizer maps it back if it keeps raw rows.
    """
    out, cache = extractor.forward(features)
    margin = settings.margin if settings.use_margin else None
    report = loss_compute(
        out, labels, table_rows_eff, settings.temperature, settings.num_neighbors,
        margin, mode=settings.neg_sampling, dedup=settings.dedup_targets,
        normalize_pixels=settings.normalize, reduction=settings.reduction,
        rng=rng, neighbor_rows=neighbor_rows,
        margin_one_sided=settings.margin_one_sided, n_threads=settings.n_threads,
    )
    grads_theta, grad_features = extractor.backward(cache, report.grad_pixels)
    return report, grads_theta, grad_features


def _embed_all(extractor, features, normalize: bool, chunk: int = 8192) -> np.ndarray:
    parts = []
    for start in range(0, features.shape[0], chunk):
        out, _ = extractor.forward(features[start:start + chunk])
        parts.append(geometry.normalize_rows(out) if normalize else out)
    return np.concatenate(parts, axis=0)


def _pixel_accuracy(embedded, labels, rows, chunk: int = 8192) -> float:
    valid = labels != IGNORE_LABEL
    emb = embedded[valid]
    lab = labels[valid]
    hits = 0
    for start in range(0, emb.shape[0], chunk):
        d2 = geometry.pairwise_sq_dists(emb[start:start + chunk], rows)
        hits += int(np.sum(np.argmin(d2, axis=1) == lab[start:start + chunk]))
    return hits / max(emb.shape[0], 1)


def train(features, labels, num_classes: int, settings: TrainSettings) -> TrainResult:
    """Run the full SGD loop and return the fitted model plus its history.

    Deterministic for a fixed seed: data order, negative draws, and both
    initializations all derive from `settings.seed`.
    """
    features = as_float_matrix(features, "features")
    labels = as_label_vector(labels)
    if labels.shape[0] != features.shape[0]:
        raise ValueError(
            f"got {features.shape[0]} feature rows but {labels.shape[0]} labels"
        )
    check_labels_in_range(labels, num_classes)
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if not np.any(labels != IGNORE_LABEL):
        raise EmptyBatchError("training data contains no labelled pixels")
    if settings.neg_sampling != "exact" and settings.num_neighbors > num_classes:
        raise ValueError(
            f"num_neighbors {settings.num_neighbors} exceeds num_classes {num_classes}"
        )

    n = features.shape[0]
    root = np.random.default_rng(settings.seed)
    table_seed = int(root.integers(2 ** 31))
    ext_seed = int(root.integers(2 ** 31))

    extractor = make_extractor(settings.extractor, features.shape[1],
                               settings.embed_dim, settings.hidden_dim, seed=ext_seed)
    table = init_table(num_classes, settings.embed_dim, table_seed,
                       normalize=settings.normalize)
    # With the Jacobian update geometry the table keeps raw rows and the loss
    # sees their normalized view; projection mode keeps the rows unit-norm
    # themselves.
    raw_rows = table.rows
    use_jacobian = settings.table_update == "jacobian" and settings.normalize

    n_batches = -(-n // settings.batch_size)
    total_iters = settings.epochs * n_batches
    main_sched = ScheduleConfig(settings.base_lr, settings.lr_power,
                                total_iters, settings.momentum)
    embed_base = settings.base_lr if settings.embed_lr is None else settings.embed_lr
    embed_sched = ScheduleConfig(embed_base, settings.embed_lr_power,
                                 total_iters, settings.embed_momentum)

    buf_main: dict = {}
    buf_table: dict = {}
    history = []
    epoch_metrics = []
    it = 0
    for epoch in range(settings.epochs):
        order = root.permutation(n)
        for start in range(0, n, settings.batch_size):
            sel = order[start:start + settings.batch_size]
            xb, yb = features[sel], labels[sel]
            eff_rows = geometry.normalize_rows(raw_rows) if use_jacobian else raw_rows

            if np.any(yb != IGNORE_LABEL):
                report, grads_theta, _ = forward_backward(
                    extractor, xb, yb, eff_rows, settings, rng=root)
            else:
                # Nothing labelled: the batch still exercises the margin term.
                margin = settings.margin if settings.use_margin else None
                reg, grad_margin = (0.0, np.zeros_like(eff_rows)) if margin is None \
                    else max_margin_loss(eff_rows, margin, settings.margin_one_sided)
                report = LossReport(0.0, float(reg), float(reg),
                                    np.zeros_like(xb), grad_margin, 0)
                grads_theta = {k: np.zeros_like(v) for k, v in extractor.params.items()}

            if not np.isfinite(report.total):
                raise NumericalError(
                    f"non-finite loss {report.total!r} at iteration {it}")
            grad_table = report.grad_table
            if use_jacobian:
                grad_table = geometry.normalize_rows_backward(raw_rows, grad_table)

            lr_main = lr_at(main_sched, it)
            lr_embed = lr_at(embed_sched, it)
            sgd_step(extractor.params, grads_theta, buf_main, lr_main,
                     settings.momentum, settings.weight_decay, _DECAY_KEYS)
            sgd_step({"table": raw_rows}, {"table": grad_table}, buf_table,
                     lr_embed, settings.embed_momentum)
            if lr_embed != 0.0 and settings.normalize and not use_jacobian:
                raw_rows[:] = geometry.normalize_rows(raw_rows)

            history.append((it, lr_main, lr_embed,
                            report.classification_loss, report.regularization_loss))
            it += 1

        if settings.eval_every_epoch:
            eff_rows = geometry.normalize_rows(raw_rows) if use_jacobian else raw_rows
            embedded = _embed_all(extractor, features, settings.normalize)
            epoch_metrics.append({
                "epoch": epoch,
                "pixel_accuracy": _pixel_accuracy(embedded, labels, eff_rows),
                "exact_loss": exact_cross_entropy(
                    embedded, labels, eff_rows, settings.temperature,
                    normalize_pixels=False),
            })

    final_rows = geometry.normalize_rows(raw_rows) if use_jacobian else raw_rows
    final = EmbeddingTable(final_rows.copy(), normalized=settings.normalize)
    return TrainResult(final, extractor, history, epoch_metrics,
                       num_classes, settings)


HISTORY_HEADER = "iter,lr_main,lr_embed,cls_loss,reg_loss"


def write_history_csv(path, history) -> None:
    with open(path, "w") as fh:
        fh.write(HISTORY_HEADER + "\n")
        for it, lr_main, lr_embed, cls_loss, reg_loss in history:
            fh.write(f"{it},{lr_main:.10g},{lr_embed:.10g},"
                     f"{cls_loss:.10g},{reg_loss:.10g}\n")


def save_checkpoint(directory, result: TrainResult) -> None:
    """Checkpoint layout: meta.json + table.esse + extractor.npz."""
    os.makedirs(directory, exist_ok=True)
    save_embeddings(result.table, os.path.join(directory, "table.esse"))
    np.savez(os.path.join(directory, "extractor.npz"), **result.extractor.params)
    meta = {
        "num_classes": result.num_classes,
        "iterations": len(result.history),
        "settings": asdict(result.settings) if result.settings else None,
        "extractor": {
            "kind": result.extractor.kind,
            "feature_dim": result.extractor.feature_dim,
            "embed_dim": result.extractor.embed_dim,
            "hidden_dim": getattr(result.extractor, "hidden_dim", None),
        },
        "epoch_metrics": result.epoch_metrics,
    }
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_checkpoint(directory):
    """Returns (table, extractor, meta) from a `save_checkpoint` directory."""
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    table = load_embeddings(os.path.join(directory, "table.esse"))
    info = meta["extractor"]
    extractor = make_extractor(info["kind"], info["feature_dim"], info["embed_dim"],
                               info.get("hidden_dim") or 64, seed=0)
    with np.load(os.path.join(directory, "extractor.npz")) as blobs:
        for name in extractor.params:
            extractor.params[name] = blobs[name].astype(np.float64)
    return table, extractor, meta
