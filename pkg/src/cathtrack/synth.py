"""Synthetic fluoroscopy-like catheter sequences.

A catheter is a smooth spline that enters from the image border and ends at
the tip.  The whole curve translates with a cardiac + respiratory + drift
motion model, and its control points wobble slightly in phase with the
heartbeat.  Scenario tags:

``fluoro``   catheter only
``angio``    adds a branching vessel tree rooted at the tip whose opacity ramps
             up between 20% and 80% of the sequence (contrast injection)
``devices``  adds static wire-like curves near the tip path
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .tensor.ops import resize_matrix

SCENARIOS = ("fluoro", "angio", "devices")
FRAME_INTERVAL_MS = 1000.0 / 15.0
NOISE_SIGMA = 0.02


@dataclass
class MotionModel:
    cardiac_amp_px: float = 3.0
    cardiac_period_frames: float = 20.0
    resp_amp_px: float = 4.0
    resp_period_frames: float = 60.0
    drift_px_per_frame: float = 0.0

    def __post_init__(self):
        if self.cardiac_period_frames < 2 or self.resp_period_frames < 2:
            raise ValueError("motion periods must be at least 2 frames")
        if min(self.cardiac_amp_px, self.resp_amp_px, self.drift_px_per_frame) < 0:
            raise ValueError("motion amplitudes must be non-negative")

    @classmethod
    def still(cls) -> "MotionModel":
        return cls(0.0, 20.0, 0.0, 60.0, 0.0)


@dataclass
class Frame:
    image: np.ndarray
    tip_gt: Optional[tuple] = None
    mask_gt: Optional[np.ndarray] = None
    timestamp_ms: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (np.array_equal(self.image, other.image)
                and self.tip_gt == other.tip_gt
                and (self.mask_gt is None) == (other.mask_gt is None)
                and (self.mask_gt is None or np.array_equal(self.mask_gt, other.mask_gt))
                and self.timestamp_ms == other.timestamp_ms)


@dataclass
class SequenceRecord:
    frames: list
    pixel_spacing_mm: float = 0.308
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple:
        return self.frames[0].image.shape

    @property
    def scenario(self) -> str:
        return self.meta.get("scenario", "fluoro")

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self) -> None:
        shape = self.size
        for i, fr in enumerate(self.frames):
            if fr.image.shape != shape:
                raise ValueError(f"frame {i} has size {fr.image.shape}, expected {shape}")
            if fr.mask_gt is not None and fr.mask_gt.shape != shape:
                raise ValueError(f"mask {i} has size {fr.mask_gt.shape}, expected {shape}")
        stamps = [fr.timestamp_ms for fr in self.frames]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("frame timestamps must be strictly increasing")


# -- geometry ------------------------------------------------------------------------

def _spline_polyline(ctrl: np.ndarray, step: float = 1.5) -> np.ndarray:
    """Dense polyline through control points (first point = tip)."""
    seg = np.linalg.norm(np.diff(ctrl, axis=0), axis=1)
    t = np.concatenate([[0.0], np.cumsum(seg)])
    cs = CubicSpline(t, ctrl, axis=0, bc_type="natural")
    ts = np.linspace(0.0, t[-1], max(int(t[-1] / step), 2) + 1)
    return cs(ts)


def _segment_distance(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point (P×2) to a polyline (S×2)."""
    if len(poly) == 1:
        poly = np.vstack([poly, poly])
    a, b = poly[:-1], poly[1:]
    ab = b - a
    denom = np.maximum((ab * ab).sum(1), 1e-12)
    best = np.full(len(points), np.inf)
    for lo in range(0, len(a), 64):
        sa, sab, sd = a[lo:lo + 64], ab[lo:lo + 64], denom[lo:lo + 64]
        ap = points[:, None, :] - sa[None]
        t = np.clip((ap * sab[None]).sum(-1) / sd[None], 0.0, 1.0)
        diff = ap - t[..., None] * sab[None]
        best = np.minimum(best, np.sqrt((diff * diff).sum(-1)).min(1))
    return best


def distance_map(poly: np.ndarray, shape: tuple, reach: float) -> np.ndarray:
    """Distance to ``poly`` at every pixel center, ``inf`` beyond ``reach``."""
    h, w = shape
    out = np.full(shape, np.inf)
    lo = np.floor(poly.min(0) - reach).astype(int)
    hi = np.ceil(poly.max(0) + reach).astype(int)
    u0, v0 = max(lo[0], 0), max(lo[1], 0)
    u1, v1 = min(hi[0], w - 1), min(hi[1], h - 1)
    if u1 < u0 or v1 < v0:
        return out
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    pts = np.stack([uu.ravel(), vv.ravel()], 1).astype(np.float64)
    d = _segment_distance(pts, poly).reshape(vv.shape)
    d[d > reach] = np.inf
    out[v0:v1 + 1, u0:u1 + 1] = d
    return out


def _coverage(dist: np.ndarray, half_width: float) -> np.ndarray:
    """Anti-aliased coverage of a stroke of the given half width."""
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0)


def _walk_curve(rng, start: np.ndarray, heading: float, size: int, margin: float,
                step: float, bend: float) -> np.ndarray:
    pts = [start]
    p = start.copy()
    for _ in range(64):
        heading += rng.normal(0.0, bend)
        p = p + step * np.array([math.cos(heading), math.sin(heading)])
        pts.append(p.copy())
        if (p < -margin).any() or (p > size - 1 + margin).any():
            break
    return np.array(pts)


def _catheter_controls(rng, size: int, margin: float) -> np.ndarray:
    tip = rng.uniform(0.35, 0.65, size=2) * (size - 1)
    # heading from tip back toward the border it enters from
    heading = rng.uniform(0, 2 * math.pi)
    return _walk_curve(rng, tip, heading, size, margin, step=size / 6.0, bend=0.35)


def _vessel_tree(rng, root: np.ndarray, heading: float, size: int) -> list:
    """Branches (control-point arrays) of a vessel tree starting at ``root``."""
    main = _walk_curve(rng, root, heading, size, 0.0, step=size / 10.0, bend=0.3)[:5]
    branches = [main]
    for k in range(rng.integers(2, 5)):
        j = rng.integers(1, len(main)) if len(main) > 1 else 0
        side = heading + rng.choice([-1, 1]) * rng.uniform(0.5, 1.3)
        br = _walk_curve(rng, main[j], side, size, 0.0, step=size / 12.0, bend=0.4)[:4]
        if len(br) >= 2:
            branches.append(br)
    return [b for b in branches if len(b) >= 2]


def _background(rng, size: int) -> np.ndarray:
    coarse = rng.normal(size=(6, 6))
    m = resize_matrix(6, size)
    field_ = m @ coarse @ m.T
    field_ = (field_ - field_.min()) / max(np.ptp(field_), 1e-9)
    return 0.55 + 0.25 * field_


# -- public API ------------------------------------------------------------------------------

def generate_sequence(seed: int, n_frames: int = 40, scenario: str = "fluoro",
                      motion: Optional[MotionModel] = None, size: int = 128,
                      noise: bool = True, annotate_every_k: int = 1) -> SequenceRecord:
    """Render one synthetic sequence; a pure function of its arguments."""
    if scenario not in SCENARIOS:
        raise ValueError(f"invalid scenario {scenario!r}; expected one of {SCENARIOS}")
    if n_frames < 2:
        raise ValueError("n_frames must be at least 2")
    if size < 16 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 16, got {size}")
    if annotate_every_k < 1:
        raise ValueError("annotate_every_k must be >= 1")
    motion = motion or MotionModel()
    rng = np.random.default_rng(seed)

    amp_total = motion.cardiac_amp_px * 1.1 + motion.resp_amp_px + motion.drift_px_per_frame * n_frames
    margin = amp_total + 8.0
    ctrl = _catheter_controls(rng, size, margin)
    half_w = rng.uniform(1.0, 2.0)          # stroke width 2-4 px
    contrast = rng.uniform(0.35, 0.5)
    background = _background(rng, size)

    dir_c = rng.normal(size=2)
    dir_c /= np.linalg.norm(dir_c)
    dir_r = rng.normal(size=2)
    dir_r /= np.linalg.norm(dir_r)
    drift_dir = rng.normal(size=2)
    drift_dir /= np.linalg.norm(drift_dir)
    phase_c, phase_r = rng.uniform(0, 2 * math.pi, size=2)
    jitter_phase = rng.uniform(0, 2 * math.pi, size=(len(ctrl), 2))
    jitter_amp = 0.1 * motion.cardiac_amp_px

    vessels = []
    if scenario == "angio":
        back = ctrl[1] - ctrl[0]
        heading = math.atan2(-back[1], -back[0]) + rng.uniform(-0.6, 0.6)
        vessels = _vessel_tree(rng, ctrl[0], heading, size)
        vessel_hw = rng.uniform(1.5, 2.5)
        vessel_contrast = rng.uniform(0.4, 0.55)

    wires = []
    if scenario == "devices":
        wires = _place_wires(rng, ctrl, size, amp_total, half_w)
        wire_hw = half_w * rng.uniform(0.8, 1.1)
        wire_contrast = contrast * rng.uniform(0.9, 1.1)

    wire_layer = np.zeros((size, size))
    for w_ctrl in wires:
        poly = _spline_polyline(w_ctrl)
        wire_layer = np.maximum(wire_layer, _coverage(distance_map(poly, (size, size), wire_hw + 1), wire_hw))

    frames = []
    for t in range(n_frames):
        offset = (motion.cardiac_amp_px * math.sin(2 * math.pi * t / motion.cardiac_period_frames + phase_c) * dir_c
                  + motion.resp_amp_px * math.sin(2 * math.pi * t / motion.resp_period_frames + phase_r) * dir_r
                  + motion.drift_px_per_frame * t * drift_dir)
        wobble = jitter_amp * np.sin(2 * math.pi * t / motion.cardiac_period_frames + jitter_phase)
        c_t = ctrl + offset + wobble
        poly = _spline_polyline(c_t)
        tip = poly[0]
        dist = distance_map(poly, (size, size), half_w + 2.0)
        cath = _coverage(dist, half_w)
        marker = _coverage(distance_map(tip[None], (size, size), half_w + 2.0), half_w + 0.5)
        img = background * (1.0 - contrast * np.maximum(cath, marker))
        img = img * (1.0 - 0.9 * contrast * wire_layer)
        if vessels:
            ramp = np.clip((t / (n_frames - 1) - 0.2) / 0.6, 0.0, 1.0)
            if ramp > 0:
                v_layer = np.zeros((size, size))
                for br in vessels:
                    vp = _spline_polyline(br + offset)
                    v_layer = np.maximum(v_layer, _coverage(distance_map(vp, (size, size), vessel_hw + 1),
                                                            vessel_hw))
                img = img * (1.0 - ramp * vessel_contrast * v_layer)
        if noise:
            img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        mask = (dist <= half_w).astype(np.uint8)
        annotated = t % annotate_every_k == 0
        frames.append(Frame(
            image=img,
            tip_gt=(float(tip[0]), float(tip[1])) if annotated else None,
            mask_gt=mask if annotated else None,
            timestamp_ms=round(t * FRAME_INTERVAL_MS, 3),
        ))
    meta = {"seed": int(seed), "scenario": scenario, "n_wires": len(wires),
            "motion": {k: float(v) for k, v in vars(motion).items()}}
    return SequenceRecord(frames=frames, pixel_spacing_mm=0.308, meta=meta)


def _place_wires(rng, ctrl: np.ndarray, size: int, travel: float, half_w: float) -> list:
    """Static wires whose free end lands near the catheter tip without touching it."""
    cath = _spline_polyline(ctrl)
    clearance = travel + 2 * half_w + 2.0
    wires = []
    for _ in range(60):
        if len(wires) >= 2:
            break
        ang = rng.uniform(0, 2 * math.pi)
        radius = rng.uniform(clearance + 1.0, clearance + 10.0)
        end = ctrl[0] + radius * np.array([math.cos(ang), math.sin(ang)])
        if (end < 4).any() or (end > size - 5).any():
            continue
        heading = rng.uniform(0, 2 * math.pi)
        w_ctrl = _walk_curve(rng, end, heading, size, 4.0, step=size / 6.0, bend=0.5)
        if len(w_ctrl) < 3:
            continue
        w_poly = _spline_polyline(w_ctrl)
        gap = _segment_distance(w_poly, cath).min()
        if gap < clearance:
            continue
        wires.append(w_ctrl)
    if not wires:
        # fall back to a straight wire well away from the catheter
        far = np.array([size - 1, size - 1]) - ctrl[0]
        start = ctrl[0] + far * 0.8
        wires.append(np.array([start, start + np.array([-size / 3.0, size / 8.0])]))
    return wires


# -- flow training data ---------------------------------------------------------------

def warp_image(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward bilinear warp: ``out(q) = img(q - flow(q))``, zero outside."""
    from .tensor.ops import bilinear_sample
    from .tensor import Tensor

    h, w = img.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (uu - flow[0]).reshape(1, -1)
    v = (vv - flow[1]).reshape(1, -1)
    return bilinear_sample(Tensor(img[None]), u, v).data.reshape(h, w)


def make_flow_training_pair(mask: np.ndarray, synthetic_flow: np.ndarray):
    """Warp a body mask by a synthetic flow ``(2, H, W)`` = (du, dv).

    Returns ``(mask, warped_mask, synthetic_flow)``; a pixel of ``mask`` at
    ``p`` lands at ``p + flow`` in ``warped_mask``.
    """
    mask = np.asarray(mask, dtype=np.float64)
    flow = np.asarray(synthetic_flow, dtype=np.float64)
    h, w = mask.shape
    if flow.shape != (2, h, w):
        raise ValueError(f"flow shape {flow.shape} does not match mask {mask.shape}")
    if np.abs(flow[0]).max() > w / 4 or np.abs(flow[1]).max() > h / 4:
        raise ValueError("synthetic flow displacement exceeds a quarter of the image")
    return mask, warp_image(mask, flow), flow


def random_smooth_flow(rng: np.random.Generator, shape: tuple, max_disp: float = 4.0,
                       smooth_frac: float = 0.5) -> np.ndarray:
    """Uniform translation plus a low-frequency perturbation."""
    h, w = shape
    base = rng.uniform(-max_disp, max_disp, size=2)
    coarse = rng.normal(0.0, max_disp * smooth_frac * 0.5, size=(2, 3, 3))
    mh, mw = resize_matrix(3, h), resize_matrix(3, w)
    pert = mh @ coarse @ mw.T
    flow = base[:, None, None] + pert
    return np.clip(flow, -max_disp, max_disp)


def uniform_flow(shape: tuple, du: float, dv: float) -> np.ndarray:
    h, w = shape
    return np.stack([np.full((h, w), float(du)), np.full((h, w), float(dv))])
