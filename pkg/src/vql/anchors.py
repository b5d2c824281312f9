"""Multi-scale anchor grid over the prediction feature map.

Anchors live in input-pixel space, center/size form. For a cell (i, j) the
center is ((j + 0.5) * stride, (i + 0.5) * stride); each base size s and
aspect ratio a yields w = s * sqrt(a), h = s / sqrt(a), so the area stays
s^2 and the base size alone controls scale. Anchor k within a cell indexes
size-major: k = size_idx * len(ratios) + ratio_idx.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError
from .geometry import clamp_min_side, iou_array


@dataclass(frozen=True)
class AnchorGrid:
    feature_h: int
    feature_w: int
    stride: float
    base_sizes: tuple[float, ...]
    aspect_ratios: tuple[float, ...]
    boxes: np.ndarray = field(repr=False)  # (h*w*n, 4) cxcywh, float64

    @property
    def anchors_per_cell(self) -> int:
        return len(self.base_sizes) * len(self.aspect_ratios)

    @property
    def n_anchors(self) -> int:
        return self.feature_h * self.feature_w * self.anchors_per_cell


@dataclass(frozen=True)
class AnchorLabels:
    """Per-frame label assignment: positive mask over the grid plus the
    ground-truth box (cxcywh array) the positives regress to, or None on
    frames without a ground-truth box."""

    positive: np.ndarray  # (n_anchors,) bool
    gt: np.ndarray | None

    @property
    def n_positive(self) -> int:
        return int(self.positive.sum())


def build_grid(feature_h: int, feature_w: int, stride: float,
               base_sizes, aspect_ratios) -> AnchorGrid:
    """Construct the deterministic anchor set for one feature map."""
    if not base_sizes or not aspect_ratios:
        raise ConfigurationError("base sizes and aspect ratios must be non-empty")
    if stride <= 0:
        raise ConfigurationError("stride must be positive")
    sizes = np.asarray(base_sizes, dtype=np.float64)
    ratios = np.asarray(aspect_ratios, dtype=np.float64)
    ws = (sizes[:, None] * np.sqrt(ratios)[None, :]).reshape(-1)
    hs = (sizes[:, None] / np.sqrt(ratios)[None, :]).reshape(-1)
    cy = (np.arange(feature_h) + 0.5) * stride
    cx = (np.arange(feature_w) + 0.5) * stride
    n = ws.size
    boxes = np.empty((feature_h, feature_w, n, 4), dtype=np.float64)
    boxes[..., 0] = cx[None, :, None]
    boxes[..., 1] = cy[:, None, None]
    boxes[..., 2] = ws[None, None, :]
    boxes[..., 3] = hs[None, None, :]
    return AnchorGrid(feature_h=feature_h, feature_w=feature_w, stride=float(stride),
                      base_sizes=tuple(float(s) for s in base_sizes),
                      aspect_ratios=tuple(float(a) for a in aspect_ratios),
                      boxes=boxes.reshape(-1, 4))


def apply_refinement(grid: AnchorGrid, deltas: np.ndarray) -> np.ndarray:
    """Refined boxes = anchors + deltas, elementwise in (cx, cy, w, h), then
    clamp so no predicted side drops below 1 pixel.

    ``deltas``: (..., n_anchors, 4); leading dims (e.g. frames) broadcast.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape[-2:] != (grid.n_anchors, 4):
        raise ShapeError(f"deltas shape {deltas.shape} does not end in "
                         f"({grid.n_anchors}, 4)")
    return clamp_min_side(grid.boxes + deltas)


def assign_labels(grid: AnchorGrid, gt: np.ndarray | None,
                  iou_threshold: float) -> AnchorLabels:
    """Positive iff IoU(original anchor, gt) >= threshold; IoU is computed
    against the anchor itself, never the refined box. A frame without a
    ground-truth box has no positives."""
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigurationError(f"iou threshold must be in (0, 1), got {iou_threshold}")
    if gt is None:
        return AnchorLabels(positive=np.zeros(grid.n_anchors, dtype=bool), gt=None)
    gt = np.asarray(gt, dtype=np.float64)
    ious = iou_array(grid.boxes, gt[None, :])
    return AnchorLabels(positive=ious >= iou_threshold, gt=gt)
