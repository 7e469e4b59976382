"""Compactness, descriptiveness (cross-entropy) and composite losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, _make


def _feature_matrix(X) -> np.ndarray:
    arr = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"feature batch must be n x k, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError("compactness loss needs a batch of at least 2 samples")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("feature batch contains non-finite values")
    return arr


def _leave_one_out_residuals(x: np.ndarray) -> np.ndarray:
    # z_i = x_i - mean of the other n-1 rows
    n = x.shape[0]
    total = x.sum(axis=0, keepdims=True)
    return x - (total - x) / (n - 1)


def compactness_forward(X) -> float:
    """Mean squared distance of each row to the mean of the remaining rows.

    Returns ``sum_i |x_i - m_i|^2 / (n k)`` where ``m_i`` averages every row
    except ``i``.
    """
    x = _feature_matrix(X)
    n, k = x.shape
    z = _leave_one_out_residuals(x)
    return float(np.sum(z * z) / (n * k))


def compactness_backward(X) -> np.ndarray:
    """Gradient of :func:`compactness_forward` with respect to every entry.

    Per feature column ``j``::

        d l / d x_ij = 2 / ((n-1) n k) * [n z_ij - sum_i' z_i'j]

    The column correction sum is zero in exact arithmetic; it is kept so the
    expression stays the literal closed form.
    """
    x = _feature_matrix(X)
    n, k = x.shape
    z = _leave_one_out_residuals(x)
    return 2.0 / ((n - 1) * n * k) * (n * z - z.sum(axis=0, keepdims=True))


def compactness(X: Tensor) -> Tensor:
    """Tape-aware compactness loss on an ``n x k`` feature tensor."""
    value = compactness_forward(X)
    grad = compactness_backward(X) if X.requires_grad else None
    return _make(np.array(value), (X,), lambda g: (g.item() * grad,), "compactness")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return np.exp(_log_softmax(np.atleast_2d(arr)))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch-mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be n x C, got {logits.shape}")
    n, num_classes = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} logit rows")
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    value = -logp[rows, y].mean()

    def rule(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return (g.item() * p / n,)

    return _make(np.array(value), (logits,), rule, "cross_entropy")


@dataclass(frozen=True)
class LossBundle:
    descriptive: float
    compact: float
    total: float
    lam: float


def composite(descriptive: float, compact: float, lam: float) -> LossBundle:
    """Combine the two losses as ``descriptive + lam * compact``."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return LossBundle(float(descriptive), float(compact), float(descriptive) + lam * float(compact), float(lam))
