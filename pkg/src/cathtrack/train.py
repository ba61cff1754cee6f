"""Training loops: the flow network on synthetic mask warps, then the
localizer and refinement head on synthetic sequences with the flow frozen."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SampleSampler, make_dataset
from .flow import FlowConfig, FlowNet, crop_for_flow, endpoint_error, flow_loss, upsample_flow, warp_point
from .fusion import fuse_score, refine_loss
from .geometry import crop_at_origin, crop_patch, patch_origin
from .localizer import LocalizerConfig, LossWeights, spatial_loss
from .losses import gaussian_target
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import TrackerConfig, TrackerModel
from .synth import generate_sequence, make_flow_training_pair, random_smooth_flow, uniform_flow
from . import tensor as T
from .tensor import GradTape, NonFiniteError
from .tensor.optim import make_optimizer

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# -- flow ----------------------------------------------------------------------------------

@dataclass
class FlowTrainConfig:
    steps: int = 500
    batch_size: int = 8
    learning_rate: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0
    crop: int = 64
    max_disp: float = 4.0
    uniform_fraction: float = 1.0     # share of pure translations, the rest smooth fields
    n_sequences: int = 40
    frames_per_sequence: int = 4
    image_size: int = 128
    augment: bool = True               # random rotations/flips of the mask before warping


def desk_localizer_config(**overrides) -> LocalizerConfig:
    """Narrower backbone and transformer used for CPU-budget training."""
    base = dict(d_model=32, channels=(16, 32, 32, 32))
    base.update(overrides)
    return LocalizerConfig(**base)


def full_localizer_config(**overrides) -> LocalizerConfig:
    """160 px search / 64 px template patches."""
    base = dict(search_size=160, template_size=64)
    base.update(overrides)
    return LocalizerConfig(**base)


def desk_train_config(**overrides) -> "TrainConfig":
    """Adaptive-moment settings that fit the desk time budget."""
    base = dict(steps=1200, optimizer="adam", learning_rate=1e-3)
    base.update(overrides)
    return TrainConfig(**base)


def tiny_flow_config() -> FlowConfig:
    """Desk-scale flow network (the defaults in :class:`FlowConfig` are the full size)."""
    return FlowConfig(stride=4, dim=16, blocks=6, levels=4, radius=3, iters=4, hidden=16)


def _mask_pool(seed: int, n_sequences: int, size: int, crop: int, n_frames: int = 12) -> list:
    """Body-mask crops centered near the tip, from a few synthetic sequences."""
    rng = np.random.default_rng(seed)
    pool = []
    for rec in make_dataset(seed, n_sequences, n_frames=n_frames, size=size):
        for fr in rec.frames:
            c = np.asarray(fr.tip_gt) + rng.uniform(-crop / 4, crop / 4, 2)
            m, _ = crop_patch(fr.mask_gt.astype(np.float64), c, crop)
            if m.sum() > 10:
                pool.append(m)
    return pool


def flow_eval_pairs(seed: int, n: int = 50, size: int = 128, crop: int = 64, max_disp: float = 4.0) -> list:
    """Held-out ``(mask, warped, flow)`` triples with uniform flows."""
    pool = _mask_pool(seed + 7919, 3, size, crop)
    rng = np.random.default_rng(seed + 17)
    out = []
    for i in range(n):
        m = pool[int(rng.integers(len(pool)))]
        du, dv = rng.uniform(-max_disp, max_disp, 2)
        out.append(make_flow_training_pair(m, uniform_flow(m.shape, du, dv)))
    return out


def evaluate_flow(net: FlowNet, pairs: list, batch: int = 10) -> float:
    """Mean endpoint error over mask pixels, averaged over pairs."""
    errs = []
    for i in range(0, len(pairs), batch):
        chunk = pairs[i:i + batch]
        a = np.stack([p[0] for p in chunk])
        b = np.stack([p[1] for p in chunk])
        field_, _ = net(a, b)
        for j, p in enumerate(chunk):
            errs.append(endpoint_error(upsample_flow(field_.flow[j], field_.stride), p[2], p[0]))
    return float(np.mean(errs))


def train_flow(cfg: FlowTrainConfig, flow_config: FlowConfig | None = None, progress=None):
    """Returns ``(net, losses)``."""
    flow_config = flow_config or tiny_flow_config()
    net = FlowNet(flow_config, seed=cfg.seed)
    pool = _mask_pool(cfg.seed, cfg.n_sequences, cfg.image_size, cfg.crop, cfg.frames_per_sequence)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = make_optimizer(cfg.optimizer, net.parameters(), cfg.learning_rate)
    losses = []
    for step in range(cfg.steps):
        a, b, f = [], [], []
        for _ in range(cfg.batch_size):
            m = pool[int(rng.integers(len(pool)))]
            if cfg.augment:
                m = np.rot90(m, int(rng.integers(4)))
                m = np.ascontiguousarray(m[:, ::-1] if rng.random() < 0.5 else m)
            if rng.random() < cfg.uniform_fraction:
                flw = uniform_flow(m.shape, *rng.uniform(-cfg.max_disp, cfg.max_disp, 2))
            else:
                flw = random_smooth_flow(rng, m.shape, cfg.max_disp)
            src, dst, flw = make_flow_training_pair(m, flw)
            a.append(src), b.append(dst), f.append(flw)
        a, b, f = np.stack(a), np.stack(b), np.stack(f)
        opt.lr = _cosine(cfg.learning_rate, step, cfg.steps)
        net.zero_grad()
        try:
            with GradTape() as tape:
                _, hist = net(a, b)
                loss = flow_loss(hist, f, a, flow_config.stride, flow_config.gamma)
            tape.backward(loss)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite flow loss at step {step}") from exc
        opt.step()
        losses.append(loss.item())
        if progress:
            progress(step, losses[-1])
    return net, losses


def _cosine(lr0: float, step: int, total: int, floor: float = 0.1) -> float:
    return lr0 * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * step / max(total, 1))))


# -- end to end ------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 8
    learning_rate: float = 1e-4
    optimizer: str = "sgd"
    seed: int = 0
    phase: str = "end2end"
    multitask: bool = True
    flow: bool = True
    multi_templates: bool = True
    n_sequences: int = 24
    n_frames: int = 40
    image_size: int = 128
    jitter: float = 4.0
    flow_jitter: float = 1.0
    loss_weights: dict = field(default_factory=lambda: asdict(LossWeights()))
    also_without_flow: bool = False   # train a flow-off refinement head on the same localizer run

    def __post_init__(self):
        if self.phase not in ("flow", "end2end"):
            raise ValueError(f"phase must be 'flow' or 'end2end', got {self.phase!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    @property
    def toggles(self) -> dict:
        return {"multitask": self.multitask, "flow": self.flow, "multi_templates": self.multi_templates}

    def to_dict(self) -> dict:
        return asdict(self)


class FlowCache:
    """Frozen-flow warped tip for each annotated frame pair, computed once on
    ground-truth masks inside a search patch centered on the previous tip."""

    def __init__(self, net: FlowNet, records: list, search_size: int, margin: int = 16):
        self.entries = {}
        mult = net.config.size_multiple
        for ri, rec in enumerate(records):
            for t in range(1, len(rec.frames)):
                fp, fc = rec.frames[t - 1], rec.frames[t]
                if fp.mask_gt is None or fc.mask_gt is None or fp.tip_gt is None:
                    continue
                origin = patch_origin(fp.tip_gt, search_size)
                a = crop_at_origin(fp.mask_gt.astype(np.float64), origin, search_size)
                b = crop_at_origin(fc.mask_gt.astype(np.float64), origin, search_size)
                crop = crop_for_flow(a, b, margin, mult)
                if crop.full:
                    continue
                field_, _ = net(crop.prev[None], crop.cur[None])
                off = (origin[0] + crop.offset[0], origin[1] + crop.offset[1])
                self.entries[(ri, t)] = (field_.flow[0], field_.stride, off)

    def warped(self, ri: int, t: int, prev_point):
        """Image-frame warped point, or None when no flow is available."""
        e = self.entries.get((ri, t))
        if e is None:
            return None
        flow, stride, off = e
        img = upsample_flow(flow, stride)
        local = (prev_point[0] - off[0], prev_point[1] - off[1])
        pt = warp_point(local, img, shape=img.shape[1:]).point
        return pt[0] + off[0], pt[1] + off[1]


def _stack(batch, n_templates):
    return (np.stack([s.search for s in batch]),
            [np.stack([s.templates[i] for s in batch]) for i in range(n_templates)])


def train_end2end(cfg: TrainConfig, loc_config: LocalizerConfig, flow_net: FlowNet | None,
                  tracker_config: TrackerConfig | None = None, records: list | None = None,
                  progress=None):
    """Train localizer + refinement head(s).

    The refinement input is built from detached localizer maps, so the
    localizer run is independent of the flow toggle; with
    ``also_without_flow`` a second refinement head (flow-off) is trained
    on the same run.  Returns ``(models, curve)`` where ``models`` maps
    ``"flow"``/``"noflow"`` to :class:`TrackerModel` and ``curve`` is a
    list of per-step dicts.
    """
    if cfg.flow and flow_net is None:
        raise TrainingError("flow enabled but no trained flow network supplied")
    tcfg = tracker_config or TrackerConfig()
    variants = []
    if cfg.flow:
        variants.append("flow")
    if not cfg.flow or cfg.also_without_flow:
        variants.append("noflow")
    models = {}
    for v in variants:
        tc = TrackerConfig.from_dict({**tcfg.to_dict(), "use_flow": v == "flow",
                                      "multi_templates": cfg.multi_templates})
        lc = LocalizerConfig(**{**loc_config.to_dict(), "multitask": cfg.multitask})
        models[v] = TrackerModel(lc, tc, flow_net.config if flow_net else None, seed=cfg.seed)
        if v == "flow":
            models[v].flow = flow_net
    base = models[variants[0]]
    for v in variants[1:]:
        models[v].localizer = base.localizer           # one shared localizer run
    loc = base.localizer
    n_t = base.n_templates
    S = loc_config.search_size

    if records is None:
        records = make_dataset(cfg.seed, cfg.n_sequences, cfg.n_frames, cfg.image_size)
    sampler = SampleSampler(records, S, loc_config.template_size, n_t, jitter=cfg.jitter, seed=cfg.seed)
    cache = FlowCache(flow_net, sampler.records, S, tcfg.flow_margin) if cfg.flow else None
    weights = LossWeights(**cfg.loss_weights)
    loc_opt = make_optimizer(cfg.optimizer, loc.trainable_parameters(), cfg.learning_rate)
    ref_opts = {v: make_optimizer(cfg.optimizer, models[v].refiner.parameters(), cfg.learning_rate)
                for v in variants}
    frng = np.random.default_rng(cfg.seed + 99)
    curve = []
    for step in range(cfg.steps):
        lr = _cosine(cfg.learning_rate, step, cfg.steps)
        loc_opt.lr = lr
        for o in ref_opts.values():
            o.lr = lr
        batch = sampler.batch(cfg.batch_size)
        search, templates = _stack(batch, n_t)
        tips = [s.tip for s in batch]
        loc.zero_grad()
        for v in variants:
            models[v].refiner.zero_grad()
        row = {"step": step, "lr": lr}
        try:
            with GradTape() as tape:
                pred = loc(search, templates)
                masks = [s.mask for s in batch] if cfg.multitask else None
                loss = spatial_loss(pred, tips, masks, weights)
                row["spatial"] = loss.item()
                xs, ms = pred.tip_heatmap.data, pred.body_mask.data
                for v in variants:
                    xf = np.zeros_like(xs)
                    if v == "flow":
                        for j, s in enumerate(batch):
                            prev_img = (s.prev_tip[0] + s.origin[0], s.prev_tip[1] + s.origin[1])
                            noisy = np.asarray(prev_img) + frng.normal(0.0, cfg.flow_jitter, 2)
                            pt = cache.warped(s.record_index, s.frame_index, noisy)
                            if pt is not None:
                                xf[j] = gaussian_target((S, S), (pt[0] - s.origin[0], pt[1] - s.origin[1]),
                                                        tcfg.sigma)
                    score = fuse_score(xs, xf, ms, tcfg.alpha, tcfg.mask_cutoff)
                    ref = models[v].refiner
                    z = ref.logits(score)
                    rl = refine_loss(T.sigmoid(z), tips, tcfg.sigma, logits=z)
                    row[f"refine_{v}"] = rl.item()
                    loss = loss + rl
            tape.backward(loss)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite loss at step {step}") from exc
        row["total"] = loss.item()
        loc_opt.step()
        for o in ref_opts.values():
            o.step()
        curve.append(row)
        if progress:
            progress(step, row)
    return models, curve


def write_curve(path, curve: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(curve[0].keys()) if curve else ["step"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in curve:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def save_flow(path, net: FlowNet, meta: dict | None = None) -> Path:
    cfg = {"flow": net.config.to_dict()}
    if meta:
        cfg["meta"] = meta
    return save_checkpoint(path, cfg, {"flow": net.state_dict()})


def load_flow(path) -> FlowNet:
    cfg, sections = load_checkpoint(path)
    if "flow" not in cfg or "flow" not in sections:
        raise CheckpointError(f"{path}: not a flow checkpoint")
    net = FlowNet(FlowConfig(**cfg["flow"]))
    net.load_state_dict(sections["flow"])
    return net


def row_checkpoint_name(row) -> str:
    return "row_" + "".join(str(int(t)) for t in row) + ".ckpt"


def train_ablation_rows(cfg: TrainConfig, loc_config: LocalizerConfig, flow_net: FlowNet,
                        out_dir, tracker_config: TrackerConfig | None = None, progress=None) -> dict:
    """Checkpoints for the four ablation rows from three localizer runs:
    single template without the mask head, single template with it (flow
    and no-flow refinement heads), and multiple templates with flow."""
    out_dir = Path(out_dir)
    runs = [dict(multitask=False, flow=False, multi_templates=False, also_without_flow=False),
            dict(multitask=True, flow=True, multi_templates=False, also_without_flow=True),
            dict(multitask=True, flow=True, multi_templates=True, also_without_flow=False)]
    paths, curves = {}, {}
    for run in runs:
        rc = TrainConfig(**{**cfg.to_dict(), **run})
        t0 = time.perf_counter()
        models, curve = train_end2end(rc, loc_config, flow_net if rc.flow else None, tracker_config,
                                      progress=progress)
        secs = time.perf_counter() - t0
        for model in models.values():
            row = tuple(model.toggles[k] for k in ("multitask", "flow", "multi_templates"))
            if not model.tracker_config.use_flow:
                # keep the flow block identical across rows for config diffs
                model.flow_config = flow_net.config
            paths[row] = model.save(out_dir / row_checkpoint_name(row),
                                    {"train": rc.to_dict(), "train_seconds": secs})
            curves[row] = curve
    return {"checkpoints": paths, "curves": curves}
