"""Axis-aligned box primitives shared by the pseudo-label and metrics code.

Boxes are (x1, y1, x2, y2) corner tuples in image units with x1 < x2 and
y1 < y2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidBoxError

__all__ = ["Box", "box_array", "iou_matrix", "pair_iou"]


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidBoxError(f"box coordinates must be finite, got {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(f"box must have positive extent, got {vals}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def box_array(boxes) -> np.ndarray:
    """Stack boxes (Box instances or 4-sequences) into an [n, 4] float64 array."""
    rows = []
    for b in boxes:
        if isinstance(b, Box):
            rows.append(b.as_array())
        else:
            arr = np.asarray(b, dtype=np.float64)
            if arr.shape != (4,):
                raise InvalidBoxError(f"expected 4 coordinates, got shape {arr.shape}")
            rows.append(arr)
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack(rows)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [n, 4] and [m, 4] corner boxes -> [n, m]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.maximum(ix2 - ix1, 0.0)
    ih = np.maximum(iy2 - iy1, 0.0)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def pair_iou(a, b) -> float:
    """IoU of two boxes (Box or 4-sequence)."""
    return float(iou_matrix(box_array([a]), box_array([b]))[0, 0])
