"""Heatmap targets and the BCE / soft-dice terms shared by the spatial and
refinement stages."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

BCE_EPS = 1e-7
DICE_EPS = 1e-6


def gaussian_target(shape: tuple, center, sigma: float, truncate: float = 3.0) -> np.ndarray:
    """``exp(-|x - c|^2 / sigma^2)``, zero beyond ``truncate * sigma``.

    Not renormalized: the peak value is 1 at the center pixel.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = shape
    u = np.arange(w, dtype=np.float64) - center[0]
    v = np.arange(h, dtype=np.float64) - center[1]
    d2 = v[:, None] ** 2 + u[None, :] ** 2
    g = np.exp(-d2 / sigma ** 2)
    g[d2 > (truncate * sigma) ** 2] = 0.0
    return g


def bce(target, pred: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy per sample (leading axis), averaged with ``weights``.

    ``pred`` is clamped to [eps, 1 - eps] before the log.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    p = T.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    ll = T.log(p) * t + T.log(1.0 - p) * (1.0 - t)
    n = pred.shape[0]
    per = T.mean(T.reshape(ll, (n, -1)), axis=1) * -1.0
    return _weighted_mean(per, weights)


def bce_logits(target, logits: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Same quantity as :func:`bce` for ``pred = sigmoid(logits)``, computed as
    ``softplus(z) - t z`` so saturated pixels keep the gradient ``sigmoid(z) - t``."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    ll = T.softplus(logits) - logits * t
    n = logits.shape[0]
    per = T.mean(T.reshape(ll, (n, -1)), axis=1)
    return _weighted_mean(per, weights)


def dice(target, pred: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Soft-dice loss ``1 - (2 sum(tp) + eps) / (sum(t) + sum(p) + eps)`` per sample."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    n = pred.shape[0]
    pf = T.reshape(pred, (n, -1))
    tf = t.reshape(n, -1)
    inter = T.sum_(pf * tf, axis=1)
    denom = T.sum_(pf, axis=1) + (tf.sum(axis=1) + DICE_EPS)
    per = 1.0 - (inter * 2.0 + DICE_EPS) / denom
    return _weighted_mean(per, weights)


def _weighted_mean(per: Tensor, weights) -> Tensor:
    if weights is None:
        return T.mean(per)
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() == 0:
        return T.sum_(per * 0.0)
    return T.sum_(per * (w / w.sum()))
