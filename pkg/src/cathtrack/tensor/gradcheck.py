"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import GradTape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over entries of |a - n| / max(|a| + |n|, floor)."""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                   indices: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``param`` entries.

    ``indices`` (flat) limits the probe set for large parameters; other
    entries are left zero.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(param.shape)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_probes: int | None = None, seed: int = 0) -> float:
    """Return the max relative error between tape and finite-difference grads.

    With ``max_probes`` set, each parameter is checked on a random subset of
    that many entries.
    """
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        idx = None
        if max_probes is not None and p.size > max_probes:
            idx = np.sort(rng.choice(p.size, size=max_probes, replace=False))
        n = numerical_grad(fn, p, h, idx)
        if idx is not None:
            a, n = a.reshape(-1)[idx], n.reshape(-1)[idx]
        worst = max(worst, relative_error(a, n))
    return worst
