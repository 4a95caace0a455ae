"""Metric sub-network: a bias-free linear layer ``L`` with ``M = L^T L``.

Because the Mahalanobis matrix is never stored, only its factor, the learned
metric is positive semi-definite by construction and no projection step is
needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class MetricLayer:
    L: np.ndarray  # [m, d]

    def __post_init__(self):
        if self.L.ndim != 2:
            raise ShapeError(f"L must be 2-d, got shape {self.L.shape}")

    @property
    def in_dim(self):
        return self.L.shape[1]

    @property
    def out_dim(self):
        return self.L.shape[0]


def metric_forward(layer: MetricLayer, feature):
    """Embedding ``L @ feature`` (rows of a batch are mapped independently)."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape[-1] != layer.in_dim or f.ndim > 2:
        raise ShapeError(f"feature shape {f.shape} incompatible with L {layer.L.shape}")
    return f @ layer.L.T


def metric_backward(layer: MetricLayer, feature, grad_embedding):
    """Return ``(grad_feature, grad_L)``; grad_L is summed over a batch."""
    f = np.asarray(feature, dtype=np.float64)
    g = np.asarray(grad_embedding, dtype=np.float64)
    if f.shape[-1] != layer.in_dim or g.shape[-1] != layer.out_dim or f.shape[:-1] != g.shape[:-1]:
        raise ShapeError(f"feature {f.shape} / grad {g.shape} incompatible with L {layer.L.shape}")
    grad_feature = g @ layer.L
    if f.ndim == 1:
        grad_L = np.outer(g, f)
    else:
        grad_L = g.T @ f
    return grad_feature, grad_L


def _difference(f1, f2):
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape or f1.ndim != 1:
        raise ShapeError(f"feature shapes differ or are not vectors: {f1.shape} vs {f2.shape}")
    return f1 - f2


def mahalanobis_distance(f1, f2, M) -> float:
    """Squared distance ``(f1 - f2)^T M (f1 - f2)``."""
    delta = _difference(f1, f2)
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (delta.size, delta.size):
        raise ShapeError(f"metric matrix {M.shape} incompatible with dimension {delta.size}")
    return float(delta @ M @ delta)


def factorized_distance(f1, f2, layer: MetricLayer) -> float:
    """Squared distance ``||L (f1 - f2)||^2``."""
    delta = _difference(f1, f2)
    if delta.size != layer.in_dim:
        raise ShapeError(f"feature dimension {delta.size} incompatible with L {layer.L.shape}")
    v = layer.L @ delta
    return float(v @ v)


def reconstruct_M(layer: MetricLayer) -> np.ndarray:
    M = layer.L.T @ layer.L
    # L^T L is symmetric in exact arithmetic; remove rounding asymmetry.
    return 0.5 * (M + M.T)


def trace_regularizer(layer: MetricLayer) -> float:
    """Squared Frobenius norm of ``L``, equal to ``trace(L^T L)``."""
    return float(np.sum(layer.L * layer.L))


def min_quadratic_form(M, rng, num_vectors=1000) -> float:
    """Smallest ``x^T M x`` over random unit vectors ``x``."""
    M = np.asarray(M, dtype=np.float64)
    x = rng.standard_normal((num_vectors, M.shape[0]))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return float(np.min(np.einsum("ni,ij,nj->n", x, M, x)))
