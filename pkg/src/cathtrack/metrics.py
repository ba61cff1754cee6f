"""Tip-error metrics in millimetres and the result-table layout."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synth import SCENARIOS

SCENARIO_LABELS = {"fluoro": "Fluoro", "angio": "Angio", "devices": "Devices"}
DEFAULT_PERCENTILES = (10, 25, 50, 75, 90, 95, 99)


@dataclass
class EvalConfig:
    pixel_spacing_mm: float = 0.308
    percentiles: tuple = DEFAULT_PERCENTILES
    scenario: str = "all"

    def __post_init__(self):
        if not self.pixel_spacing_mm > 0:
            raise ValueError(f"pixel spacing must be positive, got {self.pixel_spacing_mm}")
        if self.scenario != "all" and self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario filter {self.scenario!r}")
        if any(not 0 <= p <= 100 for p in self.percentiles):
            raise ValueError("percentiles must lie in [0, 100]")


@dataclass
class SequenceResult:
    """Per-frame predictions and annotations of one tracked sequence."""
    name: str
    scenario: str
    pred: np.ndarray   # N×2 (u, v)
    gt: np.ndarray     # N×2 (u, v)


@dataclass
class Stats:
    median: float
    mean: float
    std: float
    n: int

    @classmethod
    def of(cls, d: np.ndarray) -> "Stats":
        if d.size == 0:
            return cls(float("nan"), float("nan"), float("nan"), 0)
        return cls(float(np.median(d)), float(np.mean(d)), float(np.std(d)), int(d.size))


@dataclass
class MetricsReport:
    spacing: float
    groups: dict                  # label -> Stats (scenario labels and "All")
    percentiles: dict             # label -> {p: value}
    per_sequence: dict = field(default_factory=dict)   # name -> Stats
    distances: dict = field(default_factory=dict, repr=False)   # label -> mm array

    def to_dict(self) -> dict:
        return {
            "pixel_spacing_mm": self.spacing,
            "groups": {k: vars(v) for k, v in self.groups.items()},
            "percentiles": {k: {str(p): v for p, v in ps.items()} for k, ps in self.percentiles.items()},
            "per_sequence": {k: vars(v) for k, v in self.per_sequence.items()},
        }


def tip_distances(pred, gt, spacing: float = 1.0) -> np.ndarray:
    """Per-frame Euclidean distance between aligned ``N×2`` point lists."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if p.shape != g.shape:
        raise ValueError(f"frame count mismatch: {len(p)} predictions vs {len(g)} annotations")
    return np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1]) * spacing


def evaluate(results: list, cfg: EvalConfig | None = None) -> MetricsReport:
    cfg = cfg or EvalConfig()
    by_label: dict = {}
    per_seq = {}
    for r in results:
        if cfg.scenario != "all" and r.scenario != cfg.scenario:
            continue
        d = tip_distances(r.pred, r.gt, cfg.pixel_spacing_mm)
        per_seq[r.name] = Stats.of(d)
        by_label.setdefault(SCENARIO_LABELS.get(r.scenario, r.scenario), []).append(d)
    dists = {k: np.concatenate(v) for k, v in by_label.items()}
    dists["All"] = np.concatenate(list(dists.values())) if dists else np.zeros(0)
    groups = {k: Stats.of(v) for k, v in dists.items()}
    pct = {k: ({p: float(np.percentile(v, p)) for p in cfg.percentiles} if v.size else {})
           for k, v in dists.items()}
    return MetricsReport(cfg.pixel_spacing_mm, groups, pct, per_seq, dists)


# -- table layout ----------------------------------------------------------------------------

def table_columns() -> list:
    """Median/mean per scenario, then median/mean/std over everything."""
    cols = []
    for lab in SCENARIO_LABELS.values():
        cols += [f"{lab}_median", f"{lab}_mean"]
    return cols + ["All_median", "All_mean", "All_std"]


def table_values(report: MetricsReport) -> list:
    out = []
    for col in table_columns():
        lab, stat = col.rsplit("_", 1)
        s = report.groups.get(lab)
        out.append(getattr(s, stat) if s is not None else float("nan"))
    return out


def _fmt(x: float) -> str:
    return "-" if x != x else f"{x:.2f}"


def format_table(rows: dict) -> str:
    """Plain-text table; ``rows`` maps a row name to a :class:`MetricsReport`."""
    labels = list(SCENARIO_LABELS.values())
    name_w = max([len("Model")] + [len(n) for n in rows])
    head1 = " " * name_w + " | " + " | ".join(f"{lab:^13}" for lab in labels) + " | " + f"{'All':^20}"
    head2 = f"{'Model':<{name_w}}" + " | " + " | ".join(f"{'median':>6} {'mean':>6}" for _ in labels) \
        + " | " + f"{'median':>6} {'mean':>6} {'std':>6}"
    lines = [head1, head2, "-" * len(head2)]
    for name, rep in rows.items():
        v = [_fmt(x) for x in table_values(rep)]
        cells = [f"{v[2 * i]:>6} {v[2 * i + 1]:>6}" for i in range(len(labels))]
        lines.append(f"{name:<{name_w}} | " + " | ".join(cells) + f" | {v[-3]:>6} {v[-2]:>6} {v[-1]:>6}")
    return "\n".join(lines)


def format_all_row(report: MetricsReport) -> str:
    s = report.groups["All"]
    return f"median {_fmt(s.median)} / mean {_fmt(s.mean)} / std {_fmt(s.std)}"


def write_metrics(out_dir, report: MetricsReport, name: str = "metrics") -> tuple:
    """``<name>.json`` (full report) and ``<name>.csv`` (one table row)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jp = out_dir / f"{name}.json"
    jp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    cp = out_dir / f"{name}.csv"
    with open(cp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(table_columns())
        w.writerow([repr(x) for x in table_values(report)])
    return jp, cp
