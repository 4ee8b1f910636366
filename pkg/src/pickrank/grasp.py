"""Grasp-point estimation from a depth image and a candidate bounding box.

Every valid depth pixel inside the box is back-projected through the pinhole
model into camera coordinates; the grasp point is the per-axis median of the
resulting cloud, which shrugs off boundary pixels that hit the background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Box
from .errors import DataError

DEFAULT_DEPTH_RANGE = (0.3, 5.0)  # meters, typical RGB-D envelope


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.cx <= 0 or self.cy <= 0:
            raise DataError(f"intrinsics must be positive, got {self}")


def grasp_point(
    depth: np.ndarray,
    box: Box,
    intrinsics: Intrinsics,
    depth_range: tuple[float, float] = DEFAULT_DEPTH_RANGE,
) -> np.ndarray:
    """Per-axis median of the back-projected points inside ``box``.

    ``depth`` is a (H, W) array in meters; zeros and out-of-range readings
    are discarded. Returns [x, y, z] in the camera frame.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise DataError(f"depth image must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    if box.w < 1 or box.h < 1:
        raise DataError(f"degenerate box {box}")
    if box.x < 0 or box.y < 0 or box.x + box.w > w or box.y + box.h > h:
        raise DataError(f"box {box} outside depth image of size {w}x{h}")
    lo, hi = depth_range
    patch = depth[box.y : box.y + box.h, box.x : box.x + box.w]
    vs, us = np.nonzero((patch > 0) & (patch >= lo) & (patch <= hi))
    if len(us) == 0:
        raise DataError(f"no valid depth pixels inside box {box}")
    z = patch[vs, us]
    u = us + box.x
    v = vs + box.y
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    point = np.array([np.median(x), np.median(y), np.median(z)], dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise DataError("grasp point is non-finite")
    return point
