"""Training samples for the spatial stage: search/template crops around
annotated tips, mimicking what the tracker feeds the localizer at run time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import crop_at_origin, crop_patch, patch_origin
from .synth import SCENARIOS, SequenceRecord, generate_sequence


@dataclass
class Sample:
    search: np.ndarray        # S×S
    templates: list           # list of t×t, initial first
    tip: tuple                # (u, v) in search-patch pixels
    mask: np.ndarray | None   # S×S binary or None
    prev_mask: np.ndarray | None  # previous-frame mask in the same patch frame
    prev_tip: tuple           # previous-frame tip in search-patch pixels
    origin: tuple
    record_index: int = -1    # index into the sampler's record list
    frame_index: int = -1


def make_dataset(seed: int, n_sequences: int, n_frames: int = 40, size: int = 128,
                 scenarios=SCENARIOS) -> list:
    """Deterministic list of synthetic sequences cycling through ``scenarios``."""
    out = []
    for i in range(n_sequences):
        out.append(generate_sequence(seed * 100003 + i, n_frames, scenarios[i % len(scenarios)], size=size))
    return out


def _annotated(record: SequenceRecord) -> list:
    return [i for i, fr in enumerate(record.frames) if fr.tip_gt is not None]


class SampleSampler:
    """Draws :class:`Sample` batches.

    The search window is centered on the previous annotated tip plus
    Gaussian jitter (the tracker centers on its own previous estimate).
    Dynamic templates come from earlier annotated frames, ordered by frame
    index, each cropped at a jittered tip.
    """

    def __init__(self, records: list, search_size: int, template_size: int, n_templates: int,
                 jitter: float = 2.0, max_template_age: int = 12, seed: int = 0):
        self.records = [r for r in records if len(_annotated(r)) >= 2]
        if not self.records:
            raise ValueError("dataset has no sequence with two annotated frames")
        self.search_size = search_size
        self.template_size = template_size
        self.n_templates = n_templates
        self.jitter = jitter
        self.max_template_age = max_template_age
        self.rng = np.random.default_rng(seed)

    def sample(self) -> Sample:
        rng = self.rng
        ri = int(rng.integers(len(self.records)))
        rec = self.records[ri]
        ann = _annotated(rec)
        k = int(rng.integers(1, len(ann)))
        t, prev = ann[k], ann[k - 1]
        fr, fp = rec.frames[t], rec.frames[prev]
        center = np.asarray(fp.tip_gt) + rng.normal(0.0, self.jitter, 2)
        origin = patch_origin(center, self.search_size)
        search = crop_at_origin(fr.image, origin, self.search_size)
        tip = (fr.tip_gt[0] - origin[0], fr.tip_gt[1] - origin[1])
        lim = self.search_size - 1
        tip = (min(max(tip[0], 0.0), lim), min(max(tip[1], 0.0), lim))
        mask = None if fr.mask_gt is None else crop_at_origin(fr.mask_gt.astype(np.float64), origin,
                                                              self.search_size)
        prev_mask = None if fp.mask_gt is None else crop_at_origin(fp.mask_gt.astype(np.float64), origin,
                                                                   self.search_size)
        prev_tip = (fp.tip_gt[0] - origin[0], fp.tip_gt[1] - origin[1])
        f0 = rec.frames[ann[0]]
        templates = [crop_patch(f0.image, f0.tip_gt, self.template_size)[0]]
        # dynamic slots: earlier frames (frame 0 included), repeated when too few exist,
        # matching the tracker's padding of unfilled slots
        earlier = [j for j in ann[:k] if t - j <= self.max_template_age] or [ann[0]]
        n_dyn = self.n_templates - 1
        if n_dyn:
            picks = sorted(rng.choice(earlier, size=n_dyn, replace=len(earlier) < n_dyn))
            for j in picks:
                fj = rec.frames[j]
                c = np.asarray(fj.tip_gt) + rng.normal(0.0, self.jitter / 2, 2)
                templates.append(crop_patch(fj.image, c, self.template_size)[0])
        return Sample(search, templates, tip, mask, prev_mask, prev_tip, origin, ri, t)

    def batch(self, n: int) -> list:
        return [self.sample() for _ in range(n)]
