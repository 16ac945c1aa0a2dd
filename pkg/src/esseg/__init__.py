"""Scalable dense classification with a learned class-embedding table.

Pixels (or any dense samples) are mapped to short unit-norm embeddings and
classified by the nearest row of a learned per-class table. Training uses a
sampled cross-entropy whose denominator covers only the ground-truth class
plus a handful of mined hard-negative classes, so memory and compute stay
flat as the class count grows.
"""

from . import errors
from .data import (
    Dataset,
    SyntheticSpec,
    bayes_accuracy,
    class_probabilities,
    gen_synthetic,
    load_dataset,
    save_dataset,
)
from .embeddings import (
    EmbeddingTable,
    init_table,
    load_embeddings,
    max_margin_loss,
    nearest_inter_class_distances,
    save_embeddings,
)
from .estimator import EmbeddingClassifier
from .evaluation import (
    ConfusionMatrix,
    MemoryEstimate,
    agglomerative_cluster,
    compute_metrics,
    memory_estimate,
    norm_frequency_correlation,
    predict_labels,
)
from .knn import NeighborIndex, TargetRows, knn_search, knn_with_target
from .loss import (
    LossReport,
    approx_posterior,
    exact_cross_entropy,
    exact_posterior,
    gradient_of_logits,
    loss_compute,
)
from .trainer import (
    ScheduleConfig,
    TrainResult,
    TrainSettings,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
    train,
)
from .validation import IGNORE_LABEL

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix",
    "Dataset",
    "EmbeddingClassifier",
    "EmbeddingTable",
    "IGNORE_LABEL",
    "LossReport",
    "MemoryEstimate",
    "NeighborIndex",
    "ScheduleConfig",
    "SyntheticSpec",
    "TargetRows",
    "TrainResult",
    "TrainSettings",
    "agglomerative_cluster",
    "approx_posterior",
    "bayes_accuracy",
    "class_probabilities",
    "compute_metrics",
    "errors",
    "exact_cross_entropy",
    "exact_posterior",
    "gen_synthetic",
    "gradient_of_logits",
    "init_table",
    "knn_search",
    "knn_with_target",
    "load_checkpoint",
    "load_dataset",
    "load_embeddings",
    "loss_compute",
    "lr_at",
    "max_margin_loss",
    "memory_estimate",
    "nearest_inter_class_distances",
    "norm_frequency_correlation",
    "predict_labels",
    "save_checkpoint",
    "save_dataset",
    "save_embeddings",
    "sgd_step",
    "train",
]
