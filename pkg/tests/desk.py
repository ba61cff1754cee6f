"""Desk-scale training recipe shared by the acceptance gate and the slow
regression tests.

Artifacts go to ``$CATHTRACK_ARTIFACTS`` (default ``<repo>/artifacts/desk``)
with a manifest keyed by a hash of every setting below; a matching
manifest is reused, so the measured training times are the ones recorded
when the checkpoints were produced.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

from cathtrack.ablation import ABLATION_ROWS
from cathtrack.model import TrackerConfig, TrackerModel
from cathtrack.train import (
    FlowTrainConfig, desk_localizer_config, desk_train_config, evaluate_flow, flow_eval_pairs, load_flow,
    row_checkpoint_name, save_flow, tiny_flow_config, train_ablation_rows, train_flow, write_curve,
)

ROOT = Path(__file__).resolve().parents[1]
SEED = 0

FLOW_TRAIN = dict(steps=500, batch_size=8, learning_rate=3e-3, uniform_fraction=1.0, n_sequences=40,
                  frames_per_sequence=4, seed=SEED)
E2E_TRAIN = dict(batch_size=8, seed=SEED)
LOCALIZER = dict()
TRACKER = dict()


def settings() -> dict:
    return {"flow_train": FLOW_TRAIN, "flow": tiny_flow_config().to_dict(),
            "train": desk_train_config(**E2E_TRAIN).to_dict(),
            "localizer": desk_localizer_config(**LOCALIZER).to_dict(),
            "tracker": TrackerConfig(**TRACKER).to_dict()}


def settings_hash() -> str:
    return hashlib.sha256(json.dumps(settings(), sort_keys=True, default=str).encode()).hexdigest()[:16]


def artifact_dir() -> Path:
    return Path(os.environ.get("CATHTRACK_ARTIFACTS", ROOT / "artifacts" / "desk"))


def _manifest_path() -> Path:
    return artifact_dir() / "manifest.json"


def load_manifest():
    p = _manifest_path()
    if not p.exists():
        return None
    m = json.loads(p.read_text())
    if m.get("hash") != settings_hash():
        return None
    if not all((artifact_dir() / f).exists() for f in m["files"]):
        return None
    return m


def build(log=print) -> dict:
    """Train (or reuse) the flow network and the four ablation checkpoints."""
    m = load_manifest()
    if m is not None:
        log(f"reusing desk artifacts in {artifact_dir()} (hash {m['hash']})")
        return m
    out = artifact_dir()
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    net, losses = train_flow(FlowTrainConfig(**FLOW_TRAIN), tiny_flow_config())
    flow_secs = time.perf_counter() - t0
    epe = evaluate_flow(net, flow_eval_pairs(SEED))
    save_flow(out / "flow.ckpt", net, {"train_seconds": flow_secs})
    write_curve(out / "flow_loss.csv", [{"step": i, "flow_l1": v} for i, v in enumerate(losses)])
    log(f"flow: {flow_secs:.0f}s, held-out EPE {epe:.3f} px")
    res = train_ablation_rows(desk_train_config(**E2E_TRAIN), desk_localizer_config(**LOCALIZER), net, out,
                              TrackerConfig(**TRACKER))
    files = ["flow.ckpt", "flow_loss.csv"]
    e2e_secs = {}
    for row, path in res["checkpoints"].items():
        files.append(path.name)
        e2e_secs[path.name] = _recorded_seconds(path)
    for row, curve in res["curves"].items():
        name = "loss_" + row_checkpoint_name(row).replace(".ckpt", ".csv")
        write_curve(out / name, curve)
        files.append(name)
    m = {"hash": settings_hash(), "settings": settings(), "flow_seconds": flow_secs, "flow_epe": epe,
         "train_seconds": e2e_secs, "files": sorted(set(files))}
    _manifest_path().write_text(json.dumps(m, indent=2, sort_keys=True, default=str))
    return m


def _recorded_seconds(path) -> float:
    from cathtrack.checkpoint import load_checkpoint

    cfg, _ = load_checkpoint(path)
    return float(cfg["meta"]["train_seconds"])


def models(manifest) -> dict:
    out = artifact_dir()
    return {row: TrackerModel.load(out / row_checkpoint_name(row)) for row in ABLATION_ROWS}


def flow_net():
    return load_flow(artifact_dir() / "flow.ckpt")
