"""Evaluation: temporal AP, spatio-temporal AP, recovery and success.

Each query contributes exactly one ground-truth track and at most one
prediction. AP ranks predictions by score (ties broken by query id), marks a
prediction true-positive when its IoU with its own query's ground truth
reaches the threshold, and integrates the precision-recall curve with
all-points interpolation. Missing predictions count as false negatives at
every operating point.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ShapeError
from .geometry import iou
from .inference import ResponseTrack

IOU_THRESHOLD = 0.25
RECOVERY_IOU = 0.5
SUCCESS_TUBE_IOU = 0.05


@dataclass
class EvalPair:
    query_id: str
    prediction: ResponseTrack | None
    ground_truth: ResponseTrack


@dataclass
class QueryBreakdown:
    query_id: str
    temporal_iou: float
    tube_iou: float
    recovery_pct: float
    success: bool
    score: float | None


@dataclass
class MetricsReport:
    tAP25: float
    stAP25: float
    recovery_pct: float
    success_pct: float
    n_queries: int
    per_query: list[QueryBreakdown] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {"tAP25": self.tAP25, "stAP25": self.stAP25,
                "recovery_pct": self.recovery_pct,
                "success_pct": self.success_pct, "n_queries": self.n_queries}

    def save(self, path, csv_path=None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["query_id", "temporal_iou", "tube_iou",
                                 "recovery_pct", "success", "score"])
                for q in self.per_query:
                    writer.writerow([q.query_id, f"{q.temporal_iou:.6f}",
                                     f"{q.tube_iou:.6f}", f"{q.recovery_pct:.3f}",
                                     int(q.success),
                                     "" if q.score is None else f"{q.score:.6f}"])


def temporal_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """IoU of two inclusive frame ranges, counting frames."""
    (s1, e1), (s2, e2) = a, b
    if s1 > e1 or s2 > e2:
        raise ShapeError("invalid frame range")
    inter = min(e1, e2) - max(s1, s2) + 1
    if inter <= 0:
        return 0.0
    union = (e1 - s1 + 1) + (e2 - s2 + 1) - inter
    return inter / union


def spatiotemporal_iou(a: ResponseTrack | None, b: ResponseTrack) -> float:
    """Tube IoU: sum of per-frame intersection areas over sum of per-frame
    union areas, across the union of both frame ranges. A frame covered by
    only one track contributes its full box area to the denominator."""
    if a is None:
        return 0.0
    inter_total = 0.0
    union_total = 0.0
    lo = min(a.s, b.s)
    hi = max(a.e, b.e)
    for t in range(lo, hi + 1):
        box_a = a.box_at(t)
        box_b = b.box_at(t)
        if box_a is None and box_b is None:
            continue
        if box_a is None or box_b is None:
            union_total += (box_a or box_b).area
            continue
        ax1, ay1, ax2, ay2 = box_a.to_corners()
        bx1, by1, bx2, by2 = box_b.to_corners()
        inter = (max(0.0, min(ax2, bx2) - max(ax1, bx1))
                 * max(0.0, min(ay2, by2) - max(ay1, by1)))
        inter_total += inter
        union_total += box_a.area + box_b.area - inter
    if union_total == 0.0:
        return 0.0
    return inter_total / union_total


def recovery(pred: ResponseTrack | None, gt: ResponseTrack) -> float:
    """Percentage of ground-truth-track frames where a predicted box exists
    and overlaps the ground-truth box with IoU >= 0.5."""
    hits = 0
    for t in range(gt.s, gt.e + 1):
        if pred is None:
            continue
        box_p = pred.box_at(t)
        if box_p is not None and iou(box_p, gt.box_at(t)) >= RECOVERY_IOU:
            hits += 1
    return 100.0 * hits / gt.n_frames


def success(pred: ResponseTrack | None, gt: ResponseTrack) -> bool:
    """True iff the tube IoU strictly exceeds 0.05."""
    return spatiotemporal_iou(pred, gt) > SUCCESS_TUBE_IOU


def average_precision(pairs: list[EvalPair], iou_fn,
                      threshold: float = IOU_THRESHOLD) -> float:
    """AP over queries: rank predictions by score descending (tie-break by
    query id), TP iff iou_fn(pred, gt) >= threshold, all-points interpolated
    area under the precision-recall curve."""
    if not pairs:
        raise ShapeError("average_precision needs at least one query")
    n_gt = len(pairs)
    scored = [p for p in pairs if p.prediction is not None]
    scored.sort(key=lambda p: (-(p.prediction.score or 0.0), p.query_id))
    tps = [1 if iou_fn(p.prediction, p.ground_truth) >= threshold else 0
           for p in scored]
    ap = 0.0
    tp_cum = 0
    best_future_precision = 0.0
    # walk ranks backwards so interpolated precision = max precision at
    # any recall >= current
    precisions = []
    for rank, tp in enumerate(tps, start=1):
        tp_cum += tp
        precisions.append(tp_cum / rank)
    tp_cum = 0
    interp = [0.0] * len(tps)
    for i in reversed(range(len(tps))):
        best_future_precision = max(best_future_precision, precisions[i])
        interp[i] = best_future_precision
    for i, tp in enumerate(tps):
        if tp:
            ap += interp[i] / n_gt
    return ap


def temporal_track_iou(pred: ResponseTrack, gt: ResponseTrack) -> float:
    return temporal_iou((pred.s, pred.e), (gt.s, gt.e))


def evaluate(pairs: list[EvalPair]) -> MetricsReport:
    """Full VQ2D-style report over a query set."""
    if not pairs:
        raise ShapeError("cannot evaluate an empty query set")
    per_query = []
    for p in pairs:
        t_iou = (temporal_track_iou(p.prediction, p.ground_truth)
                 if p.prediction is not None else 0.0)
        tube = spatiotemporal_iou(p.prediction, p.ground_truth)
        per_query.append(QueryBreakdown(
            query_id=p.query_id, temporal_iou=t_iou, tube_iou=tube,
            recovery_pct=recovery(p.prediction, p.ground_truth),
            success=tube > SUCCESS_TUBE_IOU,
            score=None if p.prediction is None else p.prediction.score))
    return MetricsReport(
        tAP25=average_precision(pairs, temporal_track_iou),
        stAP25=average_precision(pairs, spatiotemporal_iou),
        recovery_pct=sum(q.recovery_pct for q in per_query) / len(per_query),
        success_pct=100.0 * sum(q.success for q in per_query) / len(per_query),
        n_queries=len(pairs), per_query=per_query)
