"""Versioned binary checkpoints.

Layout (little endian)::

    magic  b"CATHCKPT"  | u32 version
    u64 config length   | config JSON (utf-8)
    u32 tensor count
    per tensor: u16 name length, name, u8 ndim, u32 dims..., float64 data

Tensor names carry a section prefix (``localizer/``, ``flow/``, ``refine/``).
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"CATHCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, sections: dict) -> Path:
    """``sections`` maps a section name to a ``state_dict``-like mapping."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    for sec, state in sections.items():
        for name, arr in state.items():
            tensors.append((f"{sec}/{name}", np.asarray(arr, dtype="<f8")))
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    return path


def load_checkpoint(path):
    """Return ``(config, sections)`` with sections as ordered name→array maps."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<Q", take(8))
    try:
        config = json.loads(take(clen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block") from exc
    (count,) = struct.unpack("<I", take(4))
    sections: dict = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        sec, _, key = name.partition("/")
        sections.setdefault(sec, OrderedDict())[key] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return config, sections
