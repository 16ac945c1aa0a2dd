"""Synthetic dense-labelling datasets and the binary dataset format.

Each class owns a fixed unit-length prototype direction in feature space;
pixels are prototype + isotropic Gaussian noise. Class frequencies are
uniform or Zipf-distributed, and a configurable fraction of pixels carries
the ignore sentinel to mimic sparse annotation. Keeping the prototypes next
to the samples makes the best achievable accuracy computable, which anchors
end-to-end training tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import BadMagicError, FormatError, LabelRangeError, TruncatedFileError
from .validation import IGNORE_LABEL, check_nonnegative

ESSD_MAGIC = b"ESSD"
ESSD_VERSION = 1
_ESSD_HEADER = struct.Struct("<4sIQIIB")
_FLAG_PROTOTYPES = 0x01
_SENTINEL_U32 = 0xFFFFFFFF


@dataclass
class SyntheticSpec:
    num_classes: int
    feature_dim: int
    pixels_per_image: int = 1024
    num_images: int = 16
    class_distribution: str = "uniform"   # "uniform" | "zipf"
    zipf_exponent: float = 1.0
    noise_sigma: float = 0.1
    ignore_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.pixels_per_image < 1 or self.num_images < 1:
            raise ValueError("pixels_per_image and num_images must be >= 1")
        if self.class_distribution not in ("uniform", "zipf"):
            raise ValueError(
                f"class_distribution must be 'uniform' or 'zipf', got {self.class_distribution!r}"
            )
        if self.class_distribution == "zipf" and self.zipf_exponent <= 0:
            raise ValueError(f"zipf_exponent must be > 0, got {self.zipf_exponent}")
        check_nonnegative("noise_sigma", self.noise_sigma)
        if not 0 <= self.ignore_fraction < 1:
            raise ValueError(
                f"ignore_fraction must be in [0, 1), got {self.ignore_fraction}"
            )

    @property
    def num_pixels(self) -> int:
        return self.pixels_per_image * self.num_images


@dataclass
class Dataset:
    """Flat pixel set: (N, F) float32 features, int64 labels with -1 = ignore."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    prototypes: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be 1-d with one entry per feature row")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        valid = self.labels != IGNORE_LABEL
        bad = valid & ((self.labels < 0) | (self.labels >= self.num_classes))
        if np.any(bad):
            raise ValueError("labels outside [0, num_classes) and not the ignore sentinel")
        if self.prototypes is not None:
            self.prototypes = np.ascontiguousarray(self.prototypes, dtype=np.float32)
            if self.prototypes.shape != (self.num_classes, self.features.shape[1]):
                raise ValueError(
                    f"prototypes must be ({self.num_classes}, {self.features.shape[1]}), "
                    f"got {self.prototypes.shape}"
                )

    @property
    def num_pixels(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def class_probabilities(spec: SyntheticSpec) -> np.ndarray:
    """Sampling distribution over classes: uniform, or p_c proportional to 1/(c+1)^s."""
    if spec.class_distribution == "uniform":
        return np.full(spec.num_classes, 1.0 / spec.num_classes)
    ranks = np.arange(1, spec.num_classes + 1, dtype=np.float64)
    weights = ranks ** (-spec.zipf_exponent)
    return weights / weights.sum()


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Sample a dataset from the spec; identical specs yield identical bytes."""
    rng = np.random.default_rng(spec.seed)
    protos = geometry.normalize_rows(rng.standard_normal((spec.num_classes, spec.feature_dim)))
    probs = class_probabilities(spec)
    n = spec.num_pixels
    labels = rng.choice(spec.num_classes, size=n, p=probs).astype(np.int64)
    features = protos[labels] + spec.noise_sigma * rng.standard_normal((n, spec.feature_dim))
    if spec.ignore_fraction > 0:
        drop = rng.random(n) < spec.ignore_fraction
        labels[drop] = IGNORE_LABEL
    return Dataset(
        features=features.astype(np.float32),
        labels=labels,
        num_classes=spec.num_classes,
        prototypes=protos.astype(np.float32),
        meta={"spec": spec},
    )


def bayes_accuracy(dataset: Dataset) -> float:
    """Accuracy of the nearest-prototype rule on the dataset's labelled pixels.

    Under the isotropic generative model this is the maximum-likelihood
    classifier, so it upper-bounds what any learned model should be judged
    against. Requires the dataset to carry its prototypes.
    """
    if dataset.prototypes is None:
        raise ValueError("dataset has no prototypes; bayes_accuracy needs a synthetic set")
    valid = dataset.labels != IGNORE_LABEL
    if not np.any(valid):
        raise ValueError("dataset has no labelled pixels")
    feats = dataset.features[valid].astype(np.float64)
    labs = dataset.labels[valid]
    protos = dataset.prototypes.astype(np.float64)
    hits = 0
    for start in range(0, feats.shape[0], 8192):
        chunk = feats[start:start + 8192]
        d2 = geometry.pairwise_sq_dists(chunk, protos)
        hits += int(np.sum(np.argmin(d2, axis=1) == labs[start:start + 8192]))
    return hits / feats.shape[0]


def save_dataset(dataset: Dataset, path) -> None:
    """Binary layout: header, N*F float32 features, N uint32 labels, then
    C*F float32 prototypes when the header flag bit 0 is set.

    All fields little-endian; the ignore sentinel is stored as 0xFFFFFFFF.
    """
    has_protos = dataset.prototypes is not None
    flags = _FLAG_PROTOTYPES if has_protos else 0
    header = _ESSD_HEADER.pack(
        ESSD_MAGIC, ESSD_VERSION, dataset.num_pixels, dataset.feature_dim,
        dataset.num_classes, flags,
    )
    stored_labels = np.where(
        dataset.labels == IGNORE_LABEL, _SENTINEL_U32, dataset.labels
    ).astype("<u4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
        fh.write(stored_labels.tobytes())
        if has_protos:
            fh.write(np.ascontiguousarray(dataset.prototypes, dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    """Read a dataset written by `save_dataset`, validating header and labels."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _ESSD_HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the fixed header")
    magic, version, n, feat_dim, num_classes, flags = _ESSD_HEADER.unpack_from(blob)
    if magic != ESSD_MAGIC:
        raise BadMagicError(f"{path}: expected magic {ESSD_MAGIC!r}, found {magic!r}")
    if version != ESSD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    has_protos = bool(flags & _FLAG_PROTOTYPES)
    if flags & ~_FLAG_PROTOTYPES:
        raise FormatError(f"{path}: unknown flag bits 0x{flags:02x}")
    expected = _ESSD_HEADER.size + 4 * n * feat_dim + 4 * n
    if has_protos:
        expected += 4 * num_classes * feat_dim
    if len(blob) < expected:
        raise TruncatedFileError(
            f"{path}: header declares {n} pixels but the payload is short"
        )
    if len(blob) > expected:
        raise FormatError(f"{path}: {len(blob) - expected} trailing bytes after the payload")

    offset = _ESSD_HEADER.size
    features = np.frombuffer(blob, dtype="<f4", count=n * feat_dim, offset=offset)
    features = features.reshape(n, feat_dim)
    offset += 4 * n * feat_dim
    raw_labels = np.frombuffer(blob, dtype="<u4", count=n, offset=offset)
    offset += 4 * n
    prototypes = None
    if has_protos:
        prototypes = np.frombuffer(
            blob, dtype="<f4", count=num_classes * feat_dim, offset=offset
        ).reshape(num_classes, feat_dim)

    labels = raw_labels.astype(np.int64)
    labels[raw_labels == _SENTINEL_U32] = IGNORE_LABEL
    out_of_range = (labels != IGNORE_LABEL) & (labels >= num_classes)
    if np.any(out_of_range):
        worst = int(labels[out_of_range].max())
        raise LabelRangeError(
            f"{path}: stored label {worst} but the header declares {num_classes} classes"
        )
    return Dataset(features=features.copy(), labels=labels, num_classes=num_classes,
                   prototypes=None if prototypes is None else prototypes.copy())
