"""Mask-space optical flow: residual feature encoder, all-pairs correlation
pyramid, windowed lookup and a convolutional GRU that refines the flow by
additive updates.  Also point warping and the mask-driven crop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .losses import gaussian_target
from .tensor import Tensor
from .tensor.nn import Conv2d, Module


@dataclass
class FlowConfig:
    stride: int = 4
    dim: int = 32          # feature channels D_f
    blocks: int = 6
    levels: int = 4
    radius: int = 3
    iters: int = 4
    hidden: int = 32
    scale_corr: bool = True
    gamma: float = 0.8     # per-iteration loss decay
    global_context: bool = True   # feed the GRU a spatial mean of the motion features

    def __post_init__(self):
        if self.stride not in (1, 2, 4, 8):
            raise ValueError(f"flow stride {self.stride} must be 1, 2, 4 or 8")
        if self.blocks < 1 or self.levels < 1 or self.radius < 0:
            raise ValueError("blocks and levels must be >= 1, radius >= 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")

    @property
    def size_multiple(self) -> int:
        """Input sides must be multiples of this for exact pyramid shapes."""
        return self.stride * 2 ** (self.levels - 1)

    @property
    def lookup_channels(self) -> int:
        return self.levels * (2 * self.radius + 1) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowField:
    flow: np.ndarray                       # N×2×H_f×W_f, feature-pixel units
    stride: int
    deltas: list = field(default_factory=list, repr=False)

    @property
    def iters(self) -> int:
        return len(self.deltas)

    def upsampled(self, i: int = 0) -> np.ndarray:
        """``2×H×W`` flow in image pixels for batch item ``i``."""
        return upsample_flow(self.flow[i], self.stride)


# -- correlation --------------------------------------------------------------------------

def correlation_volume(feat_a, feat_b, levels: int = 4, scale: bool = True) -> list:
    """All-pairs inner products of two ``N×D×H×W`` feature maps.

    Level 0 has shape ``N×(H·W)×H×W`` (source pixel first, target grid
    last); level ``i`` average-pools the target grid by ``2**i``.
    """
    a = feat_a if isinstance(feat_a, Tensor) else Tensor(feat_a)
    b = feat_b if isinstance(feat_b, Tensor) else Tensor(feat_b)
    if a.shape != b.shape or a.ndim != 4:
        raise ValueError(f"feature shapes differ or are not N×D×H×W: {a.shape} vs {b.shape}")
    n, d, h, w = a.shape
    am = T.transpose(T.reshape(a, (n, d, h * w)), 0, 2, 1)    # N × HW × D
    bm = T.reshape(b, (n, d, h * w))                           # N × D × HW
    c = T.matmul(am, bm)
    if scale:
        c = c * (1.0 / math.sqrt(d))
    pyramid = [T.reshape(c, (n, h * w, h, w))]
    for i in range(1, levels):
        flat = T.reshape(pyramid[-1], (n * h * w, 1) + pyramid[-1].shape[2:])
        pooled = T.avg_pool(flat, 2)
        pyramid.append(T.reshape(pooled, (n, h * w) + pooled.shape[2:]))
    return pyramid


def lookup(pyramid: list, flow: np.ndarray, radius: int = 3) -> Tensor:
    """Bilinear samples of each level in a ``(2r+1)^2`` window around the
    flow-displaced position of every source pixel.

    ``flow`` is ``N×2×H×W`` (feature pixels).  Returns ``N×(L·(2r+1)^2)×H×W``;
    within a level, channel ``(dy + r)·(2r+1) + (dx + r)``.
    """
    n, hw, h, w = pyramid[0].shape
    flow = np.asarray(flow, dtype=np.float64)
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    cu = (uu + flow[:, 0]).reshape(n * hw, 1)
    cv = (vv + flow[:, 1]).reshape(n * hw, 1)
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    dx, dy = dx.reshape(1, -1), dy.reshape(1, -1)
    k = dx.size
    out = []
    for lvl, corr in enumerate(pyramid):
        s = 2 ** lvl
        img = T.reshape(corr, (n * hw,) + corr.shape[2:])
        # pooled cell j covers fine cells s*j .. s*j + s - 1
        u = (cu + 0.5) / s - 0.5 + dx
        v = (cv + 0.5) / s - 0.5 + dy
        smp = T.bilinear_sample(img, u, v)                        # (N·HW) × K
        out.append(T.transpose(T.reshape(smp, (n, h, w, k)), 0, 3, 1, 2))
    return T.concat(out, axis=1)


def upsample_flow(flow: np.ndarray, stride: int) -> np.ndarray:
    """Bilinear ``×stride`` resize with magnitudes scaled by ``stride``."""
    from .tensor.ops import resize_matrix

    c, h, w = flow.shape
    if stride == 1:
        return flow.copy()
    mh, mw = resize_matrix(h, h * stride), resize_matrix(w, w * stride)
    return np.stack([mh @ flow[i] @ mw.T for i in range(c)]) * stride


def upsample_flow_tensor(flow: Tensor, stride: int) -> Tensor:
    if stride == 1:
        return flow
    h, w = flow.shape[-2:]
    return T.resize_bilinear(flow, h * stride, w * stride) * float(stride)


# -- network ------------------------------------------------------------------------------

class ResidualBlock(Module):
    def __init__(self, rng, c: int):
        self.conv1 = Conv2d(rng, c, c, 3)
        self.conv2 = Conv2d(rng, c, c, 3, gain=1.0)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x + self.conv2(T.relu(self.conv1(x))))


class FlowFeatureEncoder(Module):
    """Stem conv then residual blocks; downsampling by 2x pooling is spread
    over the first blocks to reach the configured stride."""

    def __init__(self, rng, dim: int, blocks: int, stride: int):
        self.stem = Conv2d(rng, 1, dim, 3)
        self.blocks = [ResidualBlock(rng, dim) for _ in range(blocks)]
        self.n_down = int(round(math.log2(stride)))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(f"mask size {x.shape[-2:]} not divisible by flow stride {self.stride}")
        x = T.relu(self.stem(x))
        for i, blk in enumerate(self.blocks):
            if i < self.n_down:
                x = T.avg_pool(x, 2)
            x = blk(x)
        return x


class ConvGRU(Module):
    def __init__(self, rng, hidden: int, cin: int):
        self.convz = Conv2d(rng, hidden + cin, hidden, 3, gain=1.0)
        self.convr = Conv2d(rng, hidden + cin, hidden, 3, gain=1.0)
        self.convq = Conv2d(rng, hidden + cin, hidden, 3, gain=1.0)

    def forward(self, h: Tensor, x: Tensor) -> Tensor:
        hx = T.concat([h, x], axis=1)
        z = T.sigmoid(self.convz(hx))
        r = T.sigmoid(self.convr(hx))
        q = T.tanh(self.convq(T.concat([r * h, x], axis=1)))
        return h + z * (q - h)


class FlowNet(Module):
    def __init__(self, config: FlowConfig | None = None, seed: int = 0):
        self.config = cfg = config or FlowConfig()
        rng = np.random.default_rng(seed)
        self.encoder = FlowFeatureEncoder(rng, cfg.dim, cfg.blocks, cfg.stride)
        self.hidden_init = Conv2d(rng, cfg.dim, cfg.hidden, 1, gain=1.0)
        self.motion = Conv2d(rng, cfg.lookup_channels, cfg.hidden, 1)
        # pooled motion lets one update see the whole curve: along a thin line the
        # tangential motion is locally ambiguous
        self.gru = ConvGRU(rng, cfg.hidden, cfg.hidden * (2 if cfg.global_context else 1) + 2)
        self.head1 = Conv2d(rng, cfg.hidden, cfg.hidden, 3)
        self.head2 = Conv2d(rng, cfg.hidden, 2, 3, gain=0.1)

    def features(self, masks) -> Tensor:
        arr = masks.data if isinstance(masks, Tensor) else np.asarray(masks, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        return self.encoder(Tensor(arr[:, None]))

    def refine_flow(self, feat_a: Tensor, feat_b: Tensor, iters: int | None = None):
        """Iterative estimate from ``f_0 = 0``; returns the final field and the
        per-iteration flows as tensors (for the loss)."""
        cfg = self.config
        k = cfg.iters if iters is None else iters
        if k < 1:
            raise ValueError("refine_flow needs at least one iteration")
        pyramid = correlation_volume(feat_a, feat_b, cfg.levels, cfg.scale_corr)
        n, _, h, w = feat_a.shape
        hid = T.tanh(self.hidden_init(feat_a))
        flow = Tensor(np.zeros((n, 2, h, w)))
        history, deltas = [], []
        for _ in range(k):
            # lookup coordinates are constants: no gradient through the sampling position
            corr = lookup(pyramid, flow.data, cfg.radius)
            m = T.relu(self.motion(corr))
            parts = [m, flow]
            if cfg.global_context:
                parts.append(T.mean(m, axis=(2, 3), keepdims=True) * np.ones((1, 1, h, w)))
            x = T.concat(parts, axis=1)
            hid = self.gru(hid, x)
            delta = self.head2(T.relu(self.head1(hid)))
            flow = flow + delta
            deltas.append(delta.data.copy())
            history.append(flow)
        return FlowField(flow.data.copy(), cfg.stride, deltas), history

    def forward(self, mask_a, mask_b, iters: int | None = None):
        fa = self.features(mask_a)
        fb = self.features(mask_b)
        return self.refine_flow(fa, fb, iters)


def flow_loss(history: list, target_flow: np.ndarray, valid: np.ndarray, stride: int,
              gamma: float = 0.8) -> Tensor:
    """Decay-weighted mean L1 endpoint error over ``valid`` pixels.

    ``history``: per-iteration N×2×H_f×W_f flows; ``target_flow``: N×2×H×W
    in image pixels; ``valid``: N×H×W.
    """
    tgt = np.asarray(target_flow, dtype=np.float64)
    wmask = (np.asarray(valid) > 0.5).astype(np.float64)[:, None]
    count = max(wmask.sum(), 1.0)
    k = len(history)
    total = None
    for i, f in enumerate(history):
        up = upsample_flow_tensor(f, stride)
        err = T.sum_(T.abs_(up - tgt) * wmask) * (gamma ** (k - 1 - i) / count)
        total = err if total is None else total + err
    return total


def endpoint_error(flow_img: np.ndarray, target: np.ndarray, valid: np.ndarray) -> float:
    """Mean Euclidean endpoint error over valid pixels (``2×H×W`` inputs)."""
    sel = np.asarray(valid) > 0.5
    if not sel.any():
        return 0.0
    d = np.hypot(flow_img[0] - target[0], flow_img[1] - target[1])
    return float(d[sel].mean())


# -- point warping and cropping -----------------------------------------------------------

@dataclass
class WarpResult:
    point: tuple
    heatmap: np.ndarray | None
    clamped: bool


def sample_flow(flow_img: np.ndarray, point) -> tuple:
    """Bilinear sample of a ``2×H×W`` image-resolution flow at ``(u, v)``."""
    u = np.array([[float(point[0])]])
    v = np.array([[float(point[1])]])
    vals = T.bilinear_sample(Tensor(flow_img), np.repeat(u, 2, 0), np.repeat(v, 2, 0)).data
    return float(vals[0, 0]), float(vals[1, 0])


def warp_point(prev_tip, flow_img: np.ndarray, shape: tuple | None = None, sigma: float = 2.0,
               heatmap_origin=None, heatmap_size: int | None = None) -> WarpResult:
    """Move ``prev_tip`` by the flow sampled there.

    ``flow_img`` is image-resolution (already upsampled) and indexed in the
    same frame as ``prev_tip``.  With ``shape`` the result is clamped into
    the image.  With ``heatmap_size`` a Gaussian is rendered in the patch
    starting at ``heatmap_origin``.
    """
    du, dv = sample_flow(flow_img, prev_tip)
    pt = (prev_tip[0] + du, prev_tip[1] + dv)
    clamped = False
    if shape is not None:
        h, w = shape
        c = (min(max(pt[0], 0.0), w - 1.0), min(max(pt[1], 0.0), h - 1.0))
        clamped = c != pt
        pt = c
    hm = None
    if heatmap_size is not None:
        ou, ov = heatmap_origin or (0, 0)
        hm = gaussian_target((heatmap_size, heatmap_size), (pt[0] - ou, pt[1] - ov), sigma)
    return WarpResult(pt, hm, clamped)


@dataclass
class FlowCrop:
    prev: np.ndarray
    cur: np.ndarray
    offset: tuple           # (u0, v0) of the crop in the full frame
    full: bool              # True when the masks were empty and no crop was made


def crop_for_flow(mask_prev: np.ndarray, mask_cur: np.ndarray, margin: int = 16,
                  multiple: int = 32) -> FlowCrop:
    """Crop both masks to the bounding box of their ``> 0.5`` pixels plus
    ``margin``.  The box is grown to side lengths that are multiples of
    ``multiple`` with a ``multiple``-aligned offset, then clipped to the
    frame (frame sides are assumed to be multiples as well)."""
    a = np.asarray(mask_prev, dtype=np.float64)
    b = np.asarray(mask_cur, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape
    on = (a > 0.5) | (b > 0.5)
    if not on.any():
        return FlowCrop(a, b, (0, 0), True)
    rows = np.nonzero(on.any(axis=1))[0]
    cols = np.nonzero(on.any(axis=0))[0]
    r0 = max(rows[0] - margin, 0) // multiple * multiple
    c0 = max(cols[0] - margin, 0) // multiple * multiple
    r1 = min(-(-(rows[-1] + 1 + margin) // multiple) * multiple, h)
    c1 = min(-(-(cols[-1] + 1 + margin) // multiple) * multiple, w)
    return FlowCrop(a[r0:r1, c0:c1], b[r0:r1, c0:c1], (int(c0), int(r0)), False)


def embed_flow(flow_crop_img: np.ndarray, offset, shape: tuple) -> np.ndarray:
    """Place a cropped image-resolution flow back into a zero full-frame field."""
    out = np.zeros((2,) + tuple(shape))
    u0, v0 = offset
    _, ch, cw = flow_crop_img.shape
    out[:, v0:v0 + ch, u0:u0 + cw] = flow_crop_img
    return out
