"""Run trained trackers over held-out synthetic sequences and tabulate the
component ablation (multitask head, mask flow, multiple templates)."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .metrics import EvalConfig, MetricsReport, SequenceResult, evaluate, table_columns, table_values
from .model import TrackerModel
from .synth import SCENARIOS, generate_sequence
from .tracker import track_sequence

# (multitask, flow, multi_templates), from the bare localizer to the full model
ABLATION_ROWS = [(False, False, False), (True, False, False), (True, True, False), (True, True, True)]
TOGGLE_KEYS = ("multitask", "flow", "multi_templates")
# where each toggle lives in TrackerModel.config_dict()
TOGGLE_PATHS = {"multitask": ("localizer", "multitask"), "flow": ("tracker", "use_flow"),
                "multi_templates": ("tracker", "multi_templates")}


class AblationError(ValueError):
    pass


def held_out_set(seed: int, n_per_scenario: int = 20, n_frames: int = 40, size: int = 128,
                 scenarios=SCENARIOS) -> list:
    """Held-out sequences; seeds are disjoint from :func:`make_dataset` training seeds."""
    out = []
    for s_i, sc in enumerate(scenarios):
        for i in range(n_per_scenario):
            out.append(generate_sequence(10_000_019 + seed * 7919 + s_i * 1009 + i, n_frames, sc, size=size))
    return out


def _score_one(args):
    model, rec, name = args
    preds = track_sequence(model, rec)
    idx = [i for i in range(1, len(rec.frames)) if rec.frames[i].tip_gt is not None]
    pred = np.array([preds[i].final for i in idx])
    gt = np.array([rec.frames[i].tip_gt for i in idx])
    return SequenceResult(name, rec.scenario, pred, gt)


def track_and_score(model: TrackerModel, records: list, cfg: EvalConfig | None = None,
                    workers: int = 1) -> MetricsReport:
    """Track every record from its frame-0 annotation; score frames 1..N-1."""
    jobs = [(model, rec, f"{rec.scenario}_{i:03d}") for i, rec in enumerate(records)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_score_one, jobs))
    else:
        results = [_score_one(j) for j in jobs]
    return evaluate(results, cfg)


def config_diff(a: dict, b: dict, prefix: str = "") -> list:
    """Dotted keys whose values differ between two nested config dicts."""
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        key = f"{prefix}{k}"
        if isinstance(va, dict) and isinstance(vb, dict):
            out += config_diff(va, vb, key + ".")
        elif va != vb:
            out.append(key)
    return out


def check_rows(models: dict) -> None:
    """Each model's toggles match its row, and rows differ only in toggles."""
    allowed = {".".join(p) for p in TOGGLE_PATHS.values()}
    ref = None
    for row, model in models.items():
        got = tuple(model.toggles[k] for k in TOGGLE_KEYS)
        if got != tuple(row):
            raise AblationError(f"model for row {row} has toggles {got}")
        cfg = model.config_dict()
        cfg.pop("meta", None)
        if ref is None:
            ref = cfg
            continue
        diff = config_diff(ref, cfg)
        if not (ref["tracker"]["use_flow"] and cfg["tracker"]["use_flow"]):
            # the flow network's settings are moot when a row has no flow
            diff = [k for k in diff if not k.startswith("flow.")]
        extra = [k for k in diff if k not in allowed]
        if extra:
            raise AblationError(f"row {row} differs outside the ablation toggles: {extra}")


def ablate(models: dict, records: list, cfg: EvalConfig | None = None, workers: int = 1) -> dict:
    """``models`` maps each row tuple of :data:`ABLATION_ROWS` to a model or a
    checkpoint path.  Returns ``{row: MetricsReport}`` in row order."""
    missing = [r for r in ABLATION_ROWS if r not in models]
    if missing:
        raise AblationError(f"missing checkpoint for rows {missing}")
    loaded = {}
    for row in ABLATION_ROWS:
        m = models[row]
        if not isinstance(m, TrackerModel):
            if not Path(m).exists():
                raise AblationError(f"missing checkpoint {m} for row {row}")
            m = TrackerModel.load(m)
        loaded[row] = m
    check_rows(loaded)
    return {row: track_and_score(m, records, cfg, workers) for row, m in loaded.items()}


def write_ablation_csv(path, reports: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(TOGGLE_KEYS) + table_columns())
        for row, rep in reports.items():
            w.writerow([int(t) for t in row] + [repr(x) for x in table_values(rep)])
    return path


def row_label(row) -> str:
    return " ".join(f"{k}={'on' if v else 'off'}" for k, v in zip(TOGGLE_KEYS, row))
