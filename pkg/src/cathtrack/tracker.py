"""Sequence runtime: template bookkeeping, search-window geometry and the
per-frame pipeline localizer -> mask flow -> score fusion -> refinement."""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .flow import crop_for_flow, upsample_flow, warp_point
from .fusion import fuse_score
from .geometry import crop_at_origin, crop_patch, paste_patch, patch_origin
from .localizer import soft_argmax
from .losses import gaussian_target
from .model import TrackerModel
from .synth import Frame, SequenceRecord

CSV_COLUMNS = ["frame_index", "u_s", "v_s", "u_f", "v_f", "u_final", "v_final", "confidence", "ms_per_frame"]


class TrackingError(ValueError):
    pass


@dataclass
class DynamicTemplate:
    frame_index: int
    confidence: float
    patch: np.ndarray


class TemplateSet:
    """Pinned initial template plus a FIFO of dynamic ones."""

    def __init__(self, initial: np.ndarray, max_templates: int = 3):
        if max_templates < 1:
            raise ValueError("max_templates must be >= 1")
        self.initial = initial
        self.max_templates = max_templates
        self.dynamic: deque = deque()

    @property
    def capacity(self) -> int:
        return self.max_templates - 1

    def push(self, frame_index: int, confidence: float, patch: np.ndarray) -> None:
        if self.dynamic and frame_index <= self.dynamic[-1].frame_index:
            raise ValueError("dynamic templates must arrive in frame order")
        if self.capacity == 0:
            return
        self.dynamic.append(DynamicTemplate(frame_index, confidence, patch))
        while len(self.dynamic) > self.capacity:
            self.dynamic.popleft()

    def slots(self, n: int) -> list:
        """``n`` localizer inputs: initial first, then dynamic ones by frame
        index; unfilled slots repeat the newest available template."""
        out = [self.initial] + [d.patch for d in self.dynamic][: n - 1]
        while len(out) < n:
            out.append(out[-1])
        return out


@dataclass
class TrackState:
    last_tip: tuple
    last_mask: Optional[np.ndarray]
    last_confidence: float
    search_center: tuple
    frame_index: int
    shape: tuple


@dataclass
class PredictionRecord:
    frame_index: int
    spatial: tuple
    flow: Optional[tuple]
    final: tuple
    confidence: float
    ms_per_frame: float
    flagged: bool = False
    flow_flagged: bool = False
    # patch-frame maps, kept only when requested (overlays)
    maps: dict = field(default_factory=dict, repr=False)

    def row(self) -> list:
        uf, vf = self.flow if self.flow is not None else ("", "")
        return [self.frame_index, self.spatial[0], self.spatial[1], uf, vf, self.final[0], self.final[1],
                self.confidence, self.ms_per_frame]


def _inside(pt, shape) -> bool:
    h, w = shape
    return 0 <= pt[0] <= w - 1 and 0 <= pt[1] <= h - 1


class Tracker:
    def __init__(self, model: TrackerModel):
        self.model = model
        self.cfg = model.tracker_config
        self.search_size = model.loc_config.search_size
        self.template_size = model.loc_config.template_size

    # -- lifecycle -----------------------------------------------------------------
    def init(self, frame0: Frame, x0) -> tuple:
        shape = frame0.image.shape
        if not _inside(x0, shape):
            raise TrackingError(f"initial tip {x0} outside image of shape {shape}")
        x0 = (float(x0[0]), float(x0[1]))
        templ, _ = crop_patch(frame0.image, x0, self.template_size)
        templates = TemplateSet(templ, self.model.loc_config.max_templates)
        state = TrackState(last_tip=x0, last_mask=None, last_confidence=1.0, search_center=x0,
                           frame_index=0, shape=shape)
        return state, templates

    def track_frame(self, state: TrackState, templates: TemplateSet, frame: Frame,
                    keep_maps: bool = False) -> tuple:
        t0 = time.perf_counter()
        model, cfg, S = self.model, self.cfg, self.search_size
        origin = patch_origin(state.search_center, S)
        search = crop_at_origin(frame.image, origin, S)
        pred = model.localizer(search[None], [t[None] for t in templates.slots(model.n_templates)])
        xs = pred.tip_heatmap.data[0]
        ms = pred.body_mask.data[0]
        us, vs, _, _ = soft_argmax(xs)
        prev_tip_patch = (state.last_tip[0] - origin[0], state.last_tip[1] - origin[1])

        xf = np.zeros_like(xs)
        flow_pt = None
        flow_flagged = False
        if model.flow is not None and state.last_mask is not None:
            prev_mask = crop_at_origin(state.last_mask, origin, S)
            crop = crop_for_flow(prev_mask, ms, cfg.flow_margin, model.flow_config.size_multiple)
            if crop.full:
                flow_flagged = True
            else:
                field_, _ = model.flow(crop.prev[None], crop.cur[None])
                flow_img = upsample_flow(field_.flow[0], field_.stride)
                local = (prev_tip_patch[0] - crop.offset[0], prev_tip_patch[1] - crop.offset[1])
                res = warp_point(local, flow_img, shape=flow_img.shape[1:])
                pt = (res.point[0] + crop.offset[0], res.point[1] + crop.offset[1])
                flow_flagged = res.clamped
                xf = gaussian_target((S, S), pt, cfg.sigma)
                flow_pt = (pt[0] + origin[0], pt[1] + origin[1])

        score = fuse_score(xs, xf, ms, cfg.alpha, cfg.mask_cutoff)
        refined = model.refiner(score.data[None]).data[0]
        u, v, conf, flagged = soft_argmax(refined)
        if flagged:
            final = state.last_tip
            conf = 0.0
        else:
            h, w = state.shape
            final = (min(max(u + origin[0], 0.0), w - 1.0), min(max(v + origin[1], 0.0), h - 1.0))
        ms_frame = (time.perf_counter() - t0) * 1000.0
        rec = PredictionRecord(state.frame_index, (us + origin[0], vs + origin[1]), flow_pt, final,
                               float(conf), ms_frame, flagged, flow_flagged)
        if keep_maps:
            rec.maps = {"origin": origin, "tip": xs, "mask": ms, "flow": xf, "score": score.data,
                        "refined": refined}
        new_state = TrackState(last_tip=final, last_mask=paste_patch(state.shape, ms, origin),
                               last_confidence=float(conf), search_center=final,
                               frame_index=state.frame_index + 1, shape=state.shape)
        return new_state, rec

    def maybe_update_templates(self, templates: TemplateSet, record: PredictionRecord, frame: Frame) -> bool:
        cfg = self.cfg
        if not cfg.multi_templates or record.flagged or record.frame_index == 0:
            return False
        if cfg.update_interval == float("inf") or record.frame_index % int(cfg.update_interval):
            return False
        if record.confidence < cfg.conf_threshold:
            return False
        patch, _ = crop_patch(frame.image, record.final, self.template_size)
        templates.push(record.frame_index, record.confidence, patch)
        return True

    def track_sequence(self, record: SequenceRecord, keep_maps: bool = False) -> list:
        """Initialize on the frame-0 annotation and track every frame.

        Frame 0 is also passed through the model (its record is the model's
        reading of the initialization frame and seeds the mask used by the
        flow at frame 1); the state then resets to the annotation.
        """
        if not record.frames or record.frames[0].tip_gt is None:
            raise TrackingError("frame 0 has no tip annotation to initialize from")
        state, templates = self.init(record.frames[0], record.frames[0].tip_gt)
        out = []
        for i, frame in enumerate(record.frames):
            state, rec = self.track_frame(state, templates, frame, keep_maps)
            if i == 0:
                state.last_tip = state.search_center = (float(record.frames[0].tip_gt[0]),
                                                        float(record.frames[0].tip_gt[1]))
            else:
                self.maybe_update_templates(templates, rec, frame)
            out.append(rec)
        return out


def track_sequence(model: TrackerModel, record: SequenceRecord, keep_maps: bool = False) -> list:
    return Tracker(model).track_sequence(record, keep_maps)


# -- outputs --------------------------------------------------------------------------------

def write_predictions_csv(path, records: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r.row()])
    return path


def read_predictions_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0].keys()) != CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {list(rows[0].keys())}")
    return rows


def write_overlay(path, frame: Frame, record: PredictionRecord, search_size: int) -> Path:
    """Frame with the refined heatmap, mask contour and the three tip markers."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    ax.imshow(frame.image, cmap="gray", vmin=0, vmax=1)
    if record.maps:
        u0, v0 = record.maps["origin"]
        ext = (u0 - 0.5, u0 + search_size - 0.5, v0 + search_size - 0.5, v0 - 0.5)
        ax.imshow(np.ma.masked_less(record.maps["refined"], 0.05), cmap="autumn", alpha=0.5, extent=ext,
                  vmin=0, vmax=1)
        ax.contour(np.arange(search_size) + u0, np.arange(search_size) + v0, record.maps["mask"],
                   levels=[0.5], colors="cyan", linewidths=0.8)
    ax.plot(*record.spatial, "o", mfc="none", mec="yellow", ms=6, label="spatial")
    if record.flow is not None:
        ax.plot(*record.flow, "s", mfc="none", mec="magenta", ms=6, label="flow")
    ax.plot(*record.final, "+", color="red", ms=9, label="final")
    if frame.tip_gt is not None:
        ax.plot(*frame.tip_gt, "x", color="lime", ms=6, label="gt")
    ax.set_xlim(-0.5, frame.image.shape[1] - 0.5)
    ax.set_ylim(frame.image.shape[0] - 0.5, -0.5)
    ax.set_title(f"frame {record.frame_index}  conf {record.confidence:.2f}", fontsize=8)
    ax.legend(loc="lower right", fontsize=6)
    ax.axis("off")
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path
