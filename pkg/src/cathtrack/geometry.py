"""Patch cropping with zero padding and exact patch/image coordinate maps.

Coordinates are ``(u, v)`` = (column, row) with pixel centers at integers.
A patch of side ``S`` centered at ``c`` starts at ``origin = round(c) - S//2``;
patch coordinates are ``image - origin``.
"""

from __future__ import annotations

import math

import numpy as np


def patch_origin(center, size: int) -> tuple:
    return (int(math.floor(center[0] + 0.5)) - size // 2,
            int(math.floor(center[1] + 0.5)) - size // 2)


def crop_at_origin(image: np.ndarray, origin, size: int) -> np.ndarray:
    h, w = image.shape
    u0, v0 = origin
    out = np.zeros((size, size), dtype=np.float64)
    r0, r1 = max(v0, 0), min(v0 + size, h)
    c0, c1 = max(u0, 0), min(u0 + size, w)
    if r1 > r0 and c1 > c0:
        out[r0 - v0:r1 - v0, c0 - u0:c1 - u0] = image[r0:r1, c0:c1]
    return out


def crop_patch(image: np.ndarray, center, size: int):
    """Return ``(patch, origin)`` for a ``size×size`` crop centered at ``center``."""
    origin = patch_origin(center, size)
    return crop_at_origin(image, origin, size), origin


def paste_patch(shape: tuple, patch: np.ndarray, origin) -> np.ndarray:
    """Inverse of :func:`crop_at_origin` onto a zero canvas (clipped)."""
    h, w = shape
    size_v, size_u = patch.shape
    u0, v0 = origin
    out = np.zeros(shape, dtype=np.float64)
    r0, r1 = max(v0, 0), min(v0 + size_v, h)
    c0, c1 = max(u0, 0), min(u0 + size_u, w)
    if r1 > r0 and c1 > c0:
        out[r0:r1, c0:c1] = patch[r0 - v0:r1 - v0, c0 - u0:c1 - u0]
    return out


def to_patch(point, origin) -> tuple:
    return (point[0] - origin[0], point[1] - origin[1])


def to_image(point, origin) -> tuple:
    return (point[0] + origin[0], point[1] + origin[1])


def clamp_point(point, shape: tuple):
    """Clamp ``(u, v)`` into the image; returns the point and whether it moved."""
    h, w = shape
    u = min(max(point[0], 0.0), w - 1.0)
    v = min(max(point[1], 0.0), h - 1.0)
    return (u, v), (u, v) != (point[0], point[1])
