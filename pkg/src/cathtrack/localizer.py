"""Spatial stage: CNN encoder, multi-template transformer fusion and the
dual-query decoder that predicts a tip heatmap and a catheter body mask."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .losses import bce, bce_logits, dice, gaussian_target
from .tensor import Tensor
from .tensor.nn import Conv2d, LayerNorm, Linear, Module, parameter


TIP_PRIOR = 0.01
MASK_PRIOR = 0.05


@dataclass
class LocalizerConfig:
    search_size: int = 96
    template_size: int = 48
    channels: tuple = (16, 32, 64, 64)
    stride: int = 8
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_mult: int = 2
    fcn_widths: tuple = (32, 16, 16, 16, 8, 8)
    max_templates: int = 3
    shared_template_pos: bool = False
    multitask: bool = True

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.fcn_widths = tuple(self.fcn_widths)
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.stride & (self.stride - 1) or not 1 <= self.stride <= 2 ** len(self.channels):
            raise ValueError(f"encoder stride {self.stride} must be a power of two <= 2^{len(self.channels)}")
        for s in (self.search_size, self.template_size):
            if s % self.stride:
                raise ValueError(f"patch size {s} not divisible by encoder stride {self.stride}")
        if len(self.fcn_widths) != 6:
            raise ValueError("the FCN head has exactly 6 conv layers")

    @property
    def search_tokens(self) -> int:
        return (self.search_size // self.stride) ** 2

    @property
    def template_tokens(self) -> int:
        return (self.template_size // self.stride) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossWeights:
    tip_bce: float = 1.0
    tip_dice: float = 1.0
    mask_bce: float = 1.0
    mask_dice: float = 1.0
    sigma: float = 2.0

    def __post_init__(self):
        if min(self.tip_bce, self.tip_dice, self.mask_bce, self.mask_dice) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class SpatialPrediction:
    tip_heatmap: Tensor            # N×H×W in [0, 1]
    body_mask: Tensor              # N×H×W in [0, 1]
    attention: list = field(default_factory=list, repr=False)
    tip_logits: Optional[Tensor] = field(default=None, repr=False)
    mask_logits: Optional[Tensor] = field(default=None, repr=False)

    def tip(self, i: int = 0):
        return soft_argmax(self.tip_heatmap.data[i])


# -- building blocks --------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor):
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes.

    Returns the output and the attention weights.
    """
    d = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, *range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(d))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, heads: int):
        self.heads = heads
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)

    def _split(self, x: Tensor) -> Tensor:
        n, length, d = x.shape
        return T.transpose(T.reshape(x, (n, length, self.heads, d // self.heads)), 0, 2, 1, 3)

    def forward(self, query: Tensor, memory: Tensor):
        q, k, v = self._split(self.wq(query)), self._split(self.wk(memory)), self._split(self.wv(memory))
        out, weights = attention(q, k, v)
        n, h, length, dh = out.shape
        merged = T.reshape(T.transpose(out, 0, 2, 1, 3), (n, length, h * dh))
        return self.wo(merged), weights


class FeedForward(Module):
    def __init__(self, rng, d: int, mult: int):
        self.fc1 = Linear(rng, d, d * mult)
        self.fc2 = Linear(rng, d * mult, d)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, rng, d, heads, mult):
        self.attn = MultiHeadAttention(rng, d, heads)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, mult)
        self.norm2 = LayerNorm(d)

    def forward(self, x: Tensor):
        a, w = self.attn(x, x)
        x = self.norm1(x + a)
        return self.norm2(x + self.ffn(x)), w


class DecoderLayer(Module):
    def __init__(self, rng, d, heads, mult):
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, heads)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, mult)
        self.norm3 = LayerNorm(d)

    def forward(self, q: Tensor, memory: Tensor):
        a, w1 = self.self_attn(q, q)
        q = self.norm1(q + a)
        c, w2 = self.cross_attn(q, memory)
        q = self.norm2(q + c)
        return self.norm3(q + self.ffn(q)), [w1, w2]


class FeatureEncoder(Module):
    """Four conv3x3+relu blocks; the first log2(stride) blocks end in a 2x avg-pool."""

    def __init__(self, rng, channels: Sequence[int], stride: int):
        self.n_down = int(round(math.log2(stride)))
        cin = 1
        self.convs = []
        for c in channels:
            self.convs.append(Conv2d(rng, cin, c, 3))
            cin = c
        self.out_channels = cin
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(f"image size {x.shape[-2:]} not divisible by encoder stride {self.stride}")
        for i, conv in enumerate(self.convs):
            x = T.relu(conv(x))
            if i < self.n_down:
                x = T.avg_pool(x, 2)
        return x


class HeatmapFCN(Module):
    """Three channel-reducing convs at token resolution, then three decoder
    convs (the first two preceded by 2x upsampling).  Returns logits resized
    to the search size."""

    def __init__(self, rng, d: int, widths: Sequence[int], prior: float = 0.5):
        chans = [d] + list(widths[:5])
        self.down = [Conv2d(rng, chans[i], chans[i + 1], 3) for i in range(3)]
        self.up = [Conv2d(rng, chans[3 + i], chans[4 + i], 3) for i in range(2)]
        self.up.append(Conv2d(rng, chans[5], 1, 3, gain=1.0))
        # start the sigmoid near the expected foreground rate
        self.up[-1].bias.data[:] = math.log(prior / (1.0 - prior))

    def forward(self, x: Tensor, out_size: int) -> Tensor:
        for conv in self.down:
            x = T.relu(conv(x))
        for i, conv in enumerate(self.up):
            if i < 2:
                h, w = x.shape[-2:]
                x = T.relu(conv(T.resize_bilinear(x, 2 * h, 2 * w)))
            else:
                x = conv(x)
        if x.shape[-1] != out_size:
            x = T.resize_bilinear(x, out_size, out_size)
        return x


# -- the localizer ----------------------------------------------------------------------

class Localizer(Module):
    def __init__(self, config: LocalizerConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        d = cfg.d_model
        self.encoder = FeatureEncoder(rng, cfg.channels, cfg.stride)
        self.proj = Conv2d(rng, self.encoder.out_channels, d, 1, gain=1.0)
        self.search_pos = parameter(rng.normal(0.0, 0.02, size=(cfg.search_tokens, d)))
        n_slots = 1 if cfg.shared_template_pos else cfg.max_templates
        self.template_pos = [parameter(rng.normal(0.0, 0.02, size=(cfg.template_tokens, d)))
                             for _ in range(n_slots)]
        self.enc_layers = [EncoderLayer(rng, d, cfg.heads, cfg.ffn_mult) for _ in range(cfg.enc_layers)]
        self.dec_layers = [DecoderLayer(rng, d, cfg.heads, cfg.ffn_mult) for _ in range(cfg.dec_layers)]
        self.queries = parameter(rng.normal(0.0, 1.0, size=(2, d)))
        self.tip_head = HeatmapFCN(rng, d, cfg.fcn_widths, prior=TIP_PRIOR)
        self.mask_head = HeatmapFCN(rng, d, cfg.fcn_widths, prior=MASK_PRIOR)
        if not cfg.multitask:
            for p in self.mask_head.parameters():
                p.data = np.zeros_like(p.data)

    def trainable_parameters(self) -> list:
        if self.config.multitask:
            return self.parameters()
        frozen = {id(p) for p in self.mask_head.parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    # -- stages -----------------------------------------------------------------
    def encode(self, images) -> Tensor:
        """Feature map ``C × H/s × W/s`` (batched if the input is ``N×H×W``)."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1, 1) + x.shape)
        elif x.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        f = self.encoder(x)
        return T.reshape(f, f.shape[1:]) if squeeze else f

    def _tokens(self, feat: Tensor, pos: Tensor) -> Tensor:
        p = self.proj(feat)
        n, d, h, w = p.shape
        return T.transpose(T.reshape(p, (n, d, h * w)), 0, 2, 1) + pos

    def fuse(self, search_feat: Tensor, template_feats: Sequence[Tensor]):
        """Run the transformer encoder on [search, template_1..n] tokens.

        Returns the fused tokens (search tokens first) and per-layer attention weights.
        """
        n_t = len(template_feats)
        if n_t == 0:
            raise ValueError("fuse() needs at least one template")
        if n_t > self.config.max_templates:
            raise ValueError(f"{n_t} templates exceed max_templates={self.config.max_templates}")
        parts = [self._tokens(search_feat, self.search_pos)]
        for i, tf in enumerate(template_feats):
            pos = self.template_pos[0 if self.config.shared_template_pos else i]
            parts.append(self._tokens(tf, pos))
        x = T.concat(parts, axis=1)
        weights = []
        for layer in self.enc_layers:
            x, w = layer(x)
            weights.append(w)
        return x, weights

    def decode(self, fused: Tensor) -> SpatialPrediction:
        cfg = self.config
        n, length, d = fused.shape
        ls = cfg.search_tokens
        if length < ls:
            raise ValueError(f"fused token count {length} smaller than search tokens {ls}")
        q = T.reshape(self.queries, (1, 2, d)) + Tensor(np.zeros((n, 2, d)))
        for layer in self.dec_layers:
            q, _ = layer(q, fused)
        search = fused[:, :ls, :]
        side = cfg.search_size // cfg.stride
        # similarity of every search token with each query
        sim = T.matmul(search, T.transpose(q, 0, 2, 1)) * (1.0 / math.sqrt(d))
        logits = []
        for k, head in enumerate((self.tip_head, self.mask_head)):
            weighted = search * sim[:, :, k:k + 1]
            grid = T.reshape(T.transpose(weighted, 0, 2, 1), (n, d, side, side))
            out = head(grid, cfg.search_size)
            logits.append(T.reshape(out, (n, cfg.search_size, cfg.search_size)))
        return SpatialPrediction(T.sigmoid(logits[0]), T.sigmoid(logits[1]),
                                 tip_logits=logits[0], mask_logits=logits[1])

    def forward(self, search, templates) -> SpatialPrediction:
        """``search``: N×S×S images; ``templates``: list of N×t×t images (one per slot)."""
        s = self.encode(_batched(search))
        feats = [self.encode(_batched(t)) for t in templates]
        fused, weights = self.fuse(s, feats)
        pred = self.decode(fused)
        pred.attention = weights
        return pred


def _batched(x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


# -- loss and readout ---------------------------------------------------------------------

def spatial_loss(pred: SpatialPrediction, gt_tips, gt_masks, w: LossWeights) -> Tensor:
    """Weighted BCE + dice on the Gaussian tip target and on the body mask.

    ``gt_tips``: N×2 (u, v) in search-patch pixels; ``gt_masks``: sequence of
    H×W binary maps or ``None`` (mask terms dropped for that sample).
    """
    n, h, wd = pred.tip_heatmap.shape
    tips = np.asarray(gt_tips, dtype=np.float64).reshape(n, 2)
    if (tips[:, 0] < 0).any() or (tips[:, 0] > wd - 1).any() or (tips[:, 1] < 0).any() \
            or (tips[:, 1] > h - 1).any():
        raise ValueError("ground-truth tip lies outside the image")
    g = np.stack([gaussian_target((h, wd), t, w.sigma) for t in tips])
    loss = _bce(g, pred.tip_heatmap, pred.tip_logits) * w.tip_bce + dice(g, pred.tip_heatmap) * w.tip_dice
    if gt_masks is None:
        gt_masks = [None] * n
    present = np.array([m is not None for m in gt_masks], dtype=np.float64)
    if present.any() and (w.mask_bce or w.mask_dice):
        m = np.stack([np.zeros((h, wd)) if mk is None else (np.asarray(mk) > 0).astype(np.float64)
                      for mk in gt_masks])
        loss = loss + _bce(m, pred.body_mask, pred.mask_logits, present) * w.mask_bce \
            + dice(m, pred.body_mask, present) * w.mask_dice
    return loss


def _bce(target, prob, logits, weights=None):
    # the logit form keeps a gradient on saturated pixels; values agree wherever
    # the probability clamp is inactive
    return bce(target, prob, weights) if logits is None else bce_logits(target, logits, weights)


def soft_argmax(heatmap: np.ndarray, radius: float = 5.0):
    """Intensity-weighted centroid inside a disc around the hard argmax.

    Returns ``(u, v, confidence, flagged)``.  Ties in the hard argmax go to
    the first pixel in row-major order.  An all-zero map yields the map
    center with confidence 0 and ``flagged=True``.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    h, w = hm.shape
    if (hm < 0).any():
        raise ValueError("soft_argmax expects a non-negative map")
    peak = float(hm.max())
    if peak <= 0.0:
        return (w - 1) / 2.0, (h - 1) / 2.0, 0.0, True
    r, c = divmod(int(np.argmax(hm)), w)
    ir = int(math.floor(radius))
    r0, r1, c0, c1 = max(r - ir, 0), min(r + ir + 1, h), max(c - ir, 0), min(c + ir + 1, w)
    vv, uu = np.mgrid[r0:r1, c0:c1]
    win = hm[r0:r1, c0:c1] * (((vv - r) ** 2 + (uu - c) ** 2) <= radius ** 2)
    tot = win.sum()
    return float((win * uu).sum() / tot), float((win * vv).sum() / tot), peak, False
