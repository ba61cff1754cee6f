"""Report figures (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curve(path, curve: list, keys=None) -> Path:
    """``curve`` is a list of per-step dicts (or plain floats)."""
    plt = _plt()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if curve and not isinstance(curve[0], dict):
        curve = [{"step": i, "loss": v} for i, v in enumerate(curve)]
    keys = keys or [k for k in (curve[0] if curve else {}) if k not in ("step", "lr")]
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    steps = [r["step"] for r in curve]
    for k in keys:
        ax.plot(steps, [r[k] for r in curve], lw=0.8, label=k)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_percentiles(path, reports: dict) -> Path:
    """Error-vs-percentile curves of the overall distances, one line per report."""
    plt = _plt()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    ps = np.arange(0, 101)
    for name, rep in reports.items():
        d = rep.distances.get("All")
        if d is None or d.size == 0:
            continue
        ax.plot(ps, np.percentile(d, ps), lw=1, label=name)
    ax.set_xlabel("percentile")
    ax.set_ylabel("tip error (mm)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
