"""Small feature extractors with hand-written backprop.

These stand in for the backbone that would produce pixel embeddings in a
real segmentation network. Each extractor exposes a dict of named parameter
arrays, a forward pass returning (output, cache), and a backward pass
turning an upstream gradient into (parameter gradients, input gradient).
"""

from __future__ import annotations

import numpy as np

EXTRACTOR_KINDS = ("identity", "linear", "mlp")


class IdentityExtractor:
    """Passes features through unchanged; requires feature_dim == embed_dim."""

    kind = "identity"

    def __init__(self, feature_dim: int, embed_dim: int):
        if feature_dim != embed_dim:
            raise ValueError(
                f"identity extractor needs feature_dim == embed_dim, got {feature_dim} != {embed_dim}"
            )
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray):
        return np.asarray(x, dtype=np.float64), None

    def backward(self, cache, grad_out: np.ndarray):
        return {}, grad_out


class LinearExtractor:
    """Affine map x W^T + b, the analogue of a 1x1 projection head."""

    kind = "linear"

    def __init__(self, feature_dim: int, embed_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.params = {
            "W": rng.standard_normal((embed_dim, feature_dim)) / np.sqrt(feature_dim),
            "b": np.zeros(embed_dim),
        }

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        return x @ self.params["W"].T + self.params["b"], x

    def backward(self, cache, grad_out: np.ndarray):
        x = cache
        grads = {"W": grad_out.T @ x, "b": grad_out.sum(axis=0)}
        return grads, grad_out @ self.params["W"]


class MLPExtractor:
    """One tanh hidden layer between two affine maps."""

    kind = "mlp"

    def __init__(self, feature_dim: int, embed_dim: int, hidden_dim: int = 64, seed: int = 0):
        if hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {hidden_dim}")
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.params = {
            "W1": rng.standard_normal((hidden_dim, feature_dim)) / np.sqrt(feature_dim),
            "b1": np.zeros(hidden_dim),
            "W2": rng.standard_normal((embed_dim, hidden_dim)) / np.sqrt(hidden_dim),
            "b2": np.zeros(embed_dim),
        }

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        h = np.tanh(x @ self.params["W1"].T + self.params["b1"])
        out = h @ self.params["W2"].T + self.params["b2"]
        return out, (x, h)

    def backward(self, cache, grad_out: np.ndarray):
        x, h = cache
        grads = {"W2": grad_out.T @ h, "b2": grad_out.sum(axis=0)}
        grad_h = (grad_out @ self.params["W2"]) * (1.0 - h * h)
        grads["W1"] = grad_h.T @ x
        grads["b1"] = grad_h.sum(axis=0)
        return grads, grad_h @ self.params["W1"]


def make_extractor(kind: str, feature_dim: int, embed_dim: int,
                   hidden_dim: int = 64, seed: int = 0):
    if kind == "identity":
        return IdentityExtractor(feature_dim, embed_dim)
    if kind == "linear":
        return LinearExtractor(feature_dim, embed_dim, seed=seed)
    if kind == "mlp":
        return MLPExtractor(feature_dim, embed_dim, hidden_dim=hidden_dim, seed=seed)
    raise ValueError(f"unknown extractor kind {kind!r}, expected one of {EXTRACTOR_KINDS}")
