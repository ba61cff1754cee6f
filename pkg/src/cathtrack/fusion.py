"""Score fusion of the spatial heatmap, the flow-warped heatmap and the body
mask, followed by a small convolutional refinement head."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .losses import bce, bce_logits, dice, gaussian_target
from .tensor import Tensor
from .tensor.core import as_tensor, make_result
from .tensor.nn import Conv2d, Module

DEFAULT_ALPHA = 0.5
MASK_CUTOFF = 0.5


def fuse_score(x_s, x_f, m_s, alpha: float = DEFAULT_ALPHA, cutoff: float = MASK_CUTOFF) -> Tensor:
    """``(alpha + m)(x_s + x_f)`` where ``m > cutoff``, else ``x_s + x_f``.

    Differentiable in all three maps (the mask only on the positive branch).
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    xs, xf, ms = as_tensor(x_s), as_tensor(x_f), as_tensor(m_s)
    if not xs.shape == xf.shape == ms.shape:
        raise ValueError(f"map sizes differ: {xs.shape}, {xf.shape}, {ms.shape}")
    pos = ms.data > cutoff
    total = xs.data + xf.data
    gain = np.where(pos, alpha + ms.data, 1.0)
    out = gain * total

    def bw(g):
        gs = g * gain
        return gs, gs, np.where(pos, g * total, 0.0)

    return make_result("fuse_score", out, (xs, xf, ms), bw)


class Refiner(Module):
    """Three 3x3 convs (relu, relu, sigmoid) on the fused score map."""

    def __init__(self, seed: int = 0, width: int = 16, prior: float = 0.01):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(rng, 1, width, 3)
        self.conv2 = Conv2d(rng, width, width, 3)
        self.conv3 = Conv2d(rng, width, 1, 3, gain=1.0)
        self.conv3.bias.data[:] = math.log(prior / (1.0 - prior))

    def forward(self, score) -> Tensor:
        return T.sigmoid(self.logits(score))

    def logits(self, score) -> Tensor:
        x = as_tensor(score)
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        n, h, w = x.shape
        y = T.relu(self.conv1(T.reshape(x, (n, 1, h, w))))
        y = T.relu(self.conv2(y))
        y = self.conv3(y)
        y = T.reshape(y, (n, h, w))
        return T.reshape(y, (h, w)) if squeeze else y


def refine_loss(pred: Tensor, gt_tips, sigma: float = 2.0, w_bce: float = 1.0, w_dice: float = 1.0,
                logits: Tensor | None = None) -> Tensor:
    """BCE + soft dice of the refined map against the Gaussian tip target.

    With ``logits`` (pre-sigmoid refinement output) the BCE term uses the
    saturation-safe logit form.
    """
    n, h, w = pred.shape
    g = np.stack([gaussian_target((h, w), t, sigma) for t in np.asarray(gt_tips, dtype=np.float64).reshape(n, 2)])
    b = bce(g, pred) if logits is None else bce_logits(g, logits)
    return b * w_bce + dice(g, pred) * w_dice
