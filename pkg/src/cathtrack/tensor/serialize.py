"""Plain-text tensor dump: one header line with the shape, then the values."""

from __future__ import annotations

import numpy as np

from .core import Tensor


def dump_tensor(t: Tensor, path) -> None:
    with open(path, "w") as fh:
        fh.write(" ".join(str(n) for n in t.shape) + "\n")
        fh.write(" ".join(repr(float(x)) for x in t.data.reshape(-1)) + "\n")


def load_tensor(path) -> Tensor:
    with open(path) as fh:
        header = fh.readline().split()
        values = np.array(fh.read().split(), dtype=np.float64)
    shape = tuple(int(n) for n in header)
    if int(np.prod(shape)) != values.size:
        raise ValueError(f"{path}: header shape {shape} does not match {values.size} values")
    return Tensor(values.reshape(shape))
