"""Scikit-learn style front end for the embedding classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import geometry
from .evaluation import predict_labels
from .loss import exact_posterior
from .trainer import TrainSettings, train
from .validation import (
    IGNORE_LABEL,
    as_float_matrix,
    as_label_vector,
    check_labels_in_range,
)


class EmbeddingClassifier(BaseEstimator, TransformerMixin, ClassifierMixin):
    """Dense classifier over a learned class-embedding table.

    Instead of a per-class score map, the model maps each input to a short
    embedding and classifies by the nearest row of a learned (C, embed_dim)
    table; the output memory cost is therefore independent of the number of
    classes. Training minimizes a sampled cross-entropy whose denominator
    covers each sample's ground-truth class plus `num_neighbors` mined
    classes, with a max-margin hinge keeping table rows apart.

    Parameters mirror `trainer.TrainSettings`; `num_classes=None` infers the
    class count from the labels seen in `fit`. Labels equal to -1 are
    ignored everywhere (training, scoring).

    Attributes after `fit`: `table_` (the embedding table), `extractor_`,
    `classes_`, `history_` (per-iteration loss records), `epoch_metrics_`,
    and `n_iter_`.
    """

    def __init__(self, num_classes=None, embed_dim=16, num_neighbors=8,
                 temperature=0.05, margin=0.2, use_margin=True, normalize=True,
                 dedup_targets=True, neg_sampling="knn", extractor="linear",
                 hidden_dim=64, epochs=20, batch_size=512, base_lr=0.1,
                 lr_power=0.9, momentum=0.9, embed_lr=None, embed_lr_power=0.95,
                 embed_momentum=0.95, weight_decay=1e-4, reduction="mean",
                 table_update="project", margin_one_sided=False,
                 eval_every_epoch=True, seed=0, n_threads=1):
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.num_neighbors = num_neighbors
        self.temperature = temperature
        self.margin = margin
        self.use_margin = use_margin
        self.normalize = normalize
        self.dedup_targets = dedup_targets
        self.neg_sampling = neg_sampling
        self.extractor = extractor
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lr_power = lr_power
        self.momentum = momentum
        self.embed_lr = embed_lr
        self.embed_lr_power = embed_lr_power
        self.embed_momentum = embed_momentum
        self.weight_decay = weight_decay
        self.reduction = reduction
        self.table_update = table_update
        self.margin_one_sided = margin_one_sided
        self.eval_every_epoch = eval_every_epoch
        self.seed = seed
        self.n_threads = n_threads

    def _settings(self) -> TrainSettings:
        return TrainSettings(
            embed_dim=self.embed_dim, num_neighbors=self.num_neighbors,
            temperature=self.temperature, margin=self.margin,
            use_margin=self.use_margin, normalize=self.normalize,
            dedup_targets=self.dedup_targets, neg_sampling=self.neg_sampling,
            extractor=self.extractor, hidden_dim=self.hidden_dim,
            epochs=self.epochs, batch_size=self.batch_size,
            base_lr=self.base_lr, lr_power=self.lr_power, momentum=self.momentum,
            embed_lr=self.embed_lr, embed_lr_power=self.embed_lr_power,
            embed_momentum=self.embed_momentum, weight_decay=self.weight_decay,
            reduction=self.reduction, table_update=self.table_update,
            margin_one_sided=self.margin_one_sided,
            eval_every_epoch=self.eval_every_epoch, seed=self.seed,
            n_threads=self.n_threads,
        )

    def fit(self, X, y):
        X = as_float_matrix(X, "X")
        y = as_label_vector(y, "y")
        if self.num_classes is not None:
            num_classes = int(self.num_classes)
            check_labels_in_range(y, num_classes, "y")
        else:
            valid = y[y != IGNORE_LABEL]
            if valid.size == 0:
                raise ValueError("y contains no labelled samples")
            num_classes = int(valid.max()) + 1
            if num_classes < 2:
                raise ValueError("need at least 2 classes to fit")
        result = train(X, y, num_classes, self._settings())
        self.table_ = result.table
        self.extractor_ = result.extractor
        self.classes_ = np.arange(num_classes)
        self.history_ = result.history
        self.epoch_metrics_ = result.epoch_metrics
        self.n_iter_ = len(result.history)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "table_"):
            raise RuntimeError("this EmbeddingClassifier instance is not fitted yet")

    def transform(self, X) -> np.ndarray:
        """Pixel embeddings: extractor output, unit-normalized when enabled."""
        self._check_fitted()
        X = as_float_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        out, _ = self.extractor_.forward(X)
        return geometry.normalize_rows(out) if self.normalize else out

    def predict(self, X) -> np.ndarray:
        return predict_labels(self.transform(X), self.table_)

    def predict_proba(self, X) -> np.ndarray:
        """Exact posterior over all classes (softmax of scaled distances)."""
        return exact_posterior(self.transform(X), self.table_, self.temperature)

    def score(self, X, y) -> float:
        """Accuracy over labelled samples (ignore-sentinel rows are skipped)."""
        y = as_label_vector(y, "y")
        pred = self.predict(X)
        valid = y != IGNORE_LABEL
        if not np.any(valid):
            raise ValueError("y contains no labelled samples")
        return float(np.mean(pred[valid] == y[valid]))
