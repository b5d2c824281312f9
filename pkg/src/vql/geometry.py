"""Axis-aligned box primitives: conversions, IoU and generalized IoU.

The canonical representation is center/size ``(cx, cy, w, h)`` because the
regression loss penalizes center, height and width directly; the corner form
``(x1, y1, x2, y2)`` is a derived view. All geometry runs in float64 even when
the network runs in float32.

Array functions accept stacked boxes of shape ``(..., 4)`` and broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

# Smallest side a refined box is allowed to keep, in pixels.
MIN_SIDE = 1.0


@dataclass(frozen=True)
class Box:
    """A single box in center/size form, pixel units."""

    cx: float
    cy: float
    w: float
    h: float

    def to_corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h

    def is_degenerate(self) -> bool:
        return self.w <= 0 or self.h <= 0


def corners_from_center(boxes: np.ndarray) -> np.ndarray:
    """(..., 4) cxcywh -> (..., 4) xyxy."""
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def center_from_corners(boxes: np.ndarray) -> np.ndarray:
    """(..., 4) xyxy -> (..., 4) cxcywh."""
    boxes = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def clamp_min_side(boxes: np.ndarray, min_side: float = MIN_SIDE) -> np.ndarray:
    """Clamp w and h from below so refined boxes never degenerate."""
    boxes = np.array(boxes, dtype=np.float64, copy=True)
    boxes[..., 2] = np.maximum(boxes[..., 2], min_side)
    boxes[..., 3] = np.maximum(boxes[..., 3], min_side)
    return boxes


def _check_nondegenerate(boxes: np.ndarray, name: str) -> None:
    if np.any(boxes[..., 2] <= 0) or np.any(boxes[..., 3] <= 0):
        raise GeometryError(f"{name}: degenerate box (non-positive side)")


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of cxcywh boxes; broadcasts over leading dims."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_nondegenerate(a, "iou lhs")
    _check_nondegenerate(b, "iou rhs")
    ac = corners_from_center(a)
    bc = corners_from_center(b)
    ix1 = np.maximum(ac[..., 0], bc[..., 0])
    iy1 = np.maximum(ac[..., 1], bc[..., 1])
    ix2 = np.minimum(ac[..., 2], bc[..., 2])
    iy2 = np.minimum(ac[..., 3], bc[..., 3])
    inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def giou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise generalized IoU: IoU - (area(C) - union) / area(C)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_nondegenerate(a, "giou lhs")
    _check_nondegenerate(b, "giou rhs")
    ac = corners_from_center(a)
    bc = corners_from_center(b)
    ix1 = np.maximum(ac[..., 0], bc[..., 0])
    iy1 = np.maximum(ac[..., 1], bc[..., 1])
    ix2 = np.minimum(ac[..., 2], bc[..., 2])
    iy2 = np.minimum(ac[..., 3], bc[..., 3])
    inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    cw = np.maximum(ac[..., 2], bc[..., 2]) - np.minimum(ac[..., 0], bc[..., 0])
    ch = np.maximum(ac[..., 3], bc[..., 3]) - np.minimum(ac[..., 1], bc[..., 1])
    enclosing = cw * ch
    return inter / union - (enclosing - union) / enclosing


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix (N, M) between two sets of cxcywh boxes."""
    return iou_array(np.asarray(a)[:, None, :], np.asarray(b)[None, :, :])


def iou(a: Box, b: Box) -> float:
    return float(iou_array(a.as_array(), b.as_array()))


def giou(a: Box, b: Box) -> float:
    return float(giou_array(a.as_array(), b.as_array()))
