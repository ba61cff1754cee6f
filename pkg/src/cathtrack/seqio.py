"""Sequence directories: ``seq.json`` index plus 8-bit PGM frames and masks."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .synth import Frame, SequenceRecord

INDEX_NAME = "seq.json"
FORMAT_VERSION = 1


class SequenceFormatError(ValueError):
    """Malformed sequence directory or index."""


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D array as binary PGM.  Float input is taken to be in [0, 1]."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5, maxval < 256) PGM as ``uint8``."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise SequenceFormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise SequenceFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise SequenceFormatError(f"{path}: 16-bit PGM not supported")
    data = raw[pos + 1: pos + 1 + w * h]
    if len(data) != w * h:
        raise SequenceFormatError(f"{path}: expected {w * h} pixels, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def save_sequence(record: SequenceRecord, path) -> Path:
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, fr in enumerate(record.frames):
        img_rel = f"frames/{i:05d}.pgm"
        write_pgm(root / img_rel, fr.image)
        mask_rel = None
        if fr.mask_gt is not None:
            (root / "masks").mkdir(exist_ok=True)
            mask_rel = f"masks/{i:05d}.pgm"
            write_pgm(root / mask_rel, (np.asarray(fr.mask_gt) > 0).astype(np.uint8) * 255)
        entries.append({
            "index": i,
            "timestamp_ms": fr.timestamp_ms,
            "image": img_rel,
            "tip": None if fr.tip_gt is None else [float(fr.tip_gt[0]), float(fr.tip_gt[1])],
            "mask": mask_rel,
        })
    h, w = record.size
    index = {
        "version": FORMAT_VERSION,
        "size": [h, w],
        "pixel_spacing_mm": record.pixel_spacing_mm,
        "scenario": record.scenario,
        "meta": record.meta,
        "frames": entries,
    }
    # repr-exact floats keep subpixel annotations lossless
    (root / INDEX_NAME).write_text(json.dumps(index, indent=1))
    return root


def _require(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SequenceFormatError(f"{where}: missing key {key!r}")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise SequenceFormatError(f"{where}: key {key!r} has invalid value {val!r}")
    return val


def load_sequence(path) -> SequenceRecord:
    root = Path(path)
    index_path = root / INDEX_NAME
    if not index_path.exists():
        raise FileNotFoundError(f"{index_path} not found")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(f"{index_path}: invalid JSON ({exc})") from exc
    where = str(index_path)
    size = _require(index, "size", list, where)
    if len(size) != 2 or not all(isinstance(n, int) for n in size):
        raise SequenceFormatError(f"{where}: key 'size' has invalid value {size!r}")
    spacing = _require(index, "pixel_spacing_mm", (int, float), where)
    scenario = _require(index, "scenario", str, where)
    entries = _require(index, "frames", list, where)
    meta = dict(index.get("meta") or {})
    meta.setdefault("scenario", scenario)
    frames = []
    for k, entry in enumerate(entries):
        fwhere = f"{where} frames[{k}]"
        img_rel = _require(entry, "image", str, fwhere)
        img_path = root / img_rel
        if not img_path.exists():
            raise FileNotFoundError(f"{fwhere}: image file {img_path} missing")
        image = read_pgm(img_path).astype(np.float64) / 255.0
        if list(image.shape) != size:
            raise SequenceFormatError(f"{fwhere}: image size {image.shape} != index size {tuple(size)}")
        tip = entry.get("tip")
        if tip is not None:
            if not (isinstance(tip, list) and len(tip) == 2 and all(isinstance(x, (int, float)) for x in tip)):
                raise SequenceFormatError(f"{fwhere}: key 'tip' has invalid value {tip!r}")
            tip = (float(tip[0]), float(tip[1]))
        mask = None
        mask_rel = entry.get("mask")
        if mask_rel is not None and (root / mask_rel).exists():
            mask = (read_pgm(root / mask_rel) > 127).astype(np.uint8)
            if list(mask.shape) != size:
                raise SequenceFormatError(f"{fwhere}: mask size {mask.shape} != index size {tuple(size)}")
        stamp = _require(entry, "timestamp_ms", (int, float), fwhere)
        frames.append(Frame(image=image, tip_gt=tip, mask_gt=mask, timestamp_ms=float(stamp)))
    if not frames:
        raise SequenceFormatError(f"{where}: key 'frames' is empty")
    return SequenceRecord(frames=frames, pixel_spacing_mm=float(spacing), meta=meta)
