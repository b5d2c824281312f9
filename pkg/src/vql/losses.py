"""Training objective: box regression (L1 + GIoU) on positive anchors plus a
binary occurrence loss over anchors, with batch-level hard-negative mining.

Every loss here returns analytic gradients w.r.t. its inputs so the trainer
can backpropagate through the model without an autodiff framework; the
gradients are validated against central finite differences in the tests.

Occurrence-loss modes:
  * ``bce_hnm`` - BCE over positives plus mined hard negatives at a fixed
    positive:negative ratio, pooled across all videos of the batch.
  * ``bce``     - plain BCE over every anchor (ablation).
  * ``focal``   - focal modulation over every anchor (ablation); gamma=0,
    alpha=1 reduces exactly to plain BCE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorGrid, AnchorLabels
from .config import LossConfig
from .errors import GeometryError
from .geometry import Box, MIN_SIDE, corners_from_center

PROB_EPS = 1e-7


@dataclass
class LossReport:
    l_bbox: float
    l_prob: float
    total: float
    n_pos: int
    n_neg_sampled: int


# ---------------------------------------------------------------------------
# box regression
# ---------------------------------------------------------------------------

def giou_with_grad(pred: np.ndarray, gt: np.ndarray):
    """GIoU of cxcywh boxes against one gt box, with d(giou)/d(pred).

    pred (M, 4), gt (4,) -> (giou (M,), grad (M, 4)). Both boxes must be
    non-degenerate (pred comes from apply_refinement, which clamps).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    p = corners_from_center(pred)
    g = corners_from_center(gt)
    px1, py1, px2, py2 = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
    gx1, gy1, gx2, gy2 = g[0], g[1], g[2], g[3]
    pw, ph = px2 - px1, py2 - py1

    iw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    ih = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)

    area_p = pw * ph
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter

    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    area_c = cw * ch
    giou = inter / union - (area_c - union) / area_c

    # corner partials; indicator terms pick the binding side of min/max
    di_px1 = np.where(overlap & (px1 > gx1), -ih, 0.0)
    di_px2 = np.where(overlap & (px2 < gx2), ih, 0.0)
    di_py1 = np.where(overlap & (py1 > gy1), -iw, 0.0)
    di_py2 = np.where(overlap & (py2 < gy2), iw, 0.0)

    dap_px1, dap_px2 = -ph, ph
    dap_py1, dap_py2 = -pw, pw

    dac_px1 = np.where(px1 < gx1, -ch, 0.0)
    dac_px2 = np.where(px2 > gx2, ch, 0.0)
    dac_py1 = np.where(py1 < gy1, -cw, 0.0)
    dac_py2 = np.where(py2 > gy2, cw, 0.0)

    def corner_grad(di, dap, dac):
        du = dap - di
        # d(I/U) + d(U/Ac); giou = I/U - 1 + U/Ac
        return ((di * union - inter * du) / union ** 2
                + du / area_c - union * dac / area_c ** 2)

    g_px1 = corner_grad(di_px1, dap_px1, dac_px1)
    g_px2 = corner_grad(di_px2, dap_px2, dac_px2)
    g_py1 = corner_grad(di_py1, dap_py1, dac_py1)
    g_py2 = corner_grad(di_py2, dap_py2, dac_py2)

    grad = np.stack([g_px1 + g_px2,
                     g_py1 + g_py2,
                     (g_px2 - g_px1) / 2,
                     (g_py2 - g_py1) / 2], axis=1)
    return giou, grad


def regression_loss(pred: np.ndarray, gt: np.ndarray, image_side: float,
                    lambda_giou: float):
    """Per-box regression loss and its gradient w.r.t. pred.

    L1 on center/height/width operates on coordinates normalized by the
    image side (keeps it commensurate with the GIoU term); the GIoU term is
    scale-free. pred (M, 4) cxcywh pixels, gt (4,).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if gt[2] <= 0 or gt[3] <= 0:
        raise GeometryError("degenerate ground-truth box")
    diff = (pred - gt[None, :]) / image_side
    l1 = np.abs(diff).sum(axis=1)
    g, dg = giou_with_grad(pred, gt)
    values = l1 + lambda_giou * (1.0 - g)
    grads = np.sign(diff) / image_side - lambda_giou * dg
    return values, grads


def l_reg(b_hat: Box, b: Box, lambda_giou: float, image_side: float = 1.0) -> float:
    """Scalar regression loss for a single box pair."""
    values, _ = regression_loss(b_hat.as_array()[None, :], b.as_array(),
                                image_side, lambda_giou)
    return float(values[0])


# ---------------------------------------------------------------------------
# occurrence probability losses
# ---------------------------------------------------------------------------

def bce_values(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Elementwise binary cross-entropy; probabilities clamped at 1e-7.

    Written as -log(p_t) so the focal loss at gamma=0, alpha=1 reduces to it
    bit-for-bit.
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(targets, dtype=np.float64)
    p_t = np.where(t == 1, p, 1.0 - p)
    return -np.log(p_t)


def bce_grad(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(targets, dtype=np.float64)
    return -t / p + (1.0 - t) / (1.0 - p)


def l_prob_bce(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean BCE over an already-selected anchor set."""
    probs = np.asarray(probs)
    if probs.size == 0:
        raise ValueError("empty anchor selection for probability loss")
    return float(bce_values(probs, targets).mean())


def focal_values(probs: np.ndarray, targets: np.ndarray, gamma: float,
                 alpha: float) -> np.ndarray:
    """Focal modulation of BCE: w * (1 - p_t)^gamma * (-log p_t) with
    w = alpha on positives and 1 on negatives, so gamma=0, alpha=1 is
    exactly BCE."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(targets, dtype=np.float64)
    p_t = np.where(t == 1, p, 1.0 - p)
    w = np.where(t == 1, alpha, 1.0)
    return w * (1.0 - p_t) ** gamma * (-np.log(p_t))


def focal_grad(probs: np.ndarray, targets: np.ndarray, gamma: float,
               alpha: float) -> np.ndarray:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(targets, dtype=np.float64)
    p_t = np.where(t == 1, p, 1.0 - p)
    w = np.where(t == 1, alpha, 1.0)
    # d/dp_t [ (1-p_t)^g * (-log p_t) ], then dp_t/dp = +-1
    mod = (1.0 - p_t) ** gamma
    d_pt = -mod / p_t
    if gamma > 0:
        d_pt = d_pt + gamma * (1.0 - p_t) ** (gamma - 1.0) * np.log(p_t)
    return w * d_pt * np.where(t == 1, 1.0, -1.0)


def l_prob_focal(probs: np.ndarray, targets: np.ndarray, gamma: float,
                 alpha: float) -> float:
    probs = np.asarray(probs)
    if probs.size == 0:
        raise ValueError("empty anchor selection for probability loss")
    return float(focal_values(probs, targets, gamma, alpha).mean())


# ---------------------------------------------------------------------------
# hard-negative mining
# ---------------------------------------------------------------------------

def mine_hard_negatives(batch_probs: list[np.ndarray],
                        batch_positive: list[np.ndarray],
                        ratio: int, min_k: int,
                        batch_valid: list[np.ndarray] | None = None):
    """Select the K hardest negative anchors across the whole batch.

    The negative pool is every non-positive anchor on every valid frame of
    every video (anchors of other videos in the batch included). Hardness is
    the per-anchor BCE loss against label 0, i.e. negatives the model scores
    highest. K = ratio * (total positives across the batch); with no
    positives anywhere, K falls back to ``min_k``. Ties break by
    (video, frame, anchor) index order.

    Returns (selection masks per video, K actually selected).
    """
    pool_scores = []
    pool_index = []
    total_pos = 0
    for v, (probs, positive) in enumerate(zip(batch_probs, batch_positive)):
        valid = (batch_valid[v] if batch_valid is not None
                 else np.ones(probs.shape[0], dtype=bool))
        neg = (~positive) & valid[:, None]
        total_pos += int((positive & valid[:, None]).sum())
        tt, aa = np.nonzero(neg)
        pool_scores.append(np.asarray(probs, dtype=np.float64)[tt, aa])
        pool_index.append(np.column_stack([np.full(tt.size, v), tt, aa]))
    scores = np.concatenate(pool_scores) if pool_scores else np.empty(0)
    index = (np.concatenate(pool_index, axis=0) if pool_index
             else np.empty((0, 3), dtype=int))

    k = ratio * total_pos if total_pos > 0 else min_k
    k = min(k, scores.size)
    # pool entries are already in (video, frame, anchor) order; a stable sort
    # on descending BCE loss therefore tie-breaks by that index order
    losses = bce_values(scores, np.zeros_like(scores))
    order = np.argsort(-losses, kind="stable")[:k]

    masks = [np.zeros_like(pos, dtype=bool) for pos in batch_positive]
    for v, tt, aa in index[order]:
        masks[v][tt, aa] = True
    return masks, k


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

def total_loss(probs_list: list[np.ndarray], deltas_list: list[np.ndarray],
               labels_list: list[list[AnchorLabels]], grid: AnchorGrid,
               image_side: float, cfg: LossConfig,
               valid_list: list[np.ndarray] | None = None):
    """Batch objective: total = L_bbox + lambda_prob * L_prob.

    L_bbox reduces l_reg(refined anchor, gt) over the positive anchors of the
    batch (mean by default, sum via config). L_prob depends on the mode; see
    the module docstring. Padded frames flagged invalid contribute nothing.

    Returns (LossReport, per-video (dprobs, ddeltas) gradients).
    """
    n_videos = len(probs_list)
    if valid_list is None:
        valid_list = [np.ones(p.shape[0], dtype=bool) for p in probs_list]
    positive_list = []
    for v in range(n_videos):
        pos = np.stack([lab.positive for lab in labels_list[v]])
        pos &= valid_list[v][:, None]
        positive_list.append(pos)

    grads = [(np.zeros_like(np.asarray(p, dtype=np.float64)),
              np.zeros(d.shape, dtype=np.float64))
             for p, d in zip(probs_list, deltas_list)]

    # -- box regression over positive anchors -------------------------------
    n_pos = int(sum(pos.sum() for pos in positive_list))
    bbox_terms = 0.0
    pending = []
    for v in range(n_videos):
        pos = positive_list[v]
        if not pos.any():
            continue
        deltas = np.asarray(deltas_list[v], dtype=np.float64)
        for t in np.nonzero(pos.any(axis=1))[0]:
            aa = np.nonzero(pos[t])[0]
            raw = grid.boxes[aa] + deltas[t, aa]
            clamp_active = raw[:, 2:4] < MIN_SIDE
            refined = raw.copy()
            refined[:, 2:4] = np.maximum(refined[:, 2:4], MIN_SIDE)
            values, dref = regression_loss(refined, labels_list[v][t].gt,
                                           image_side, cfg.lambda_giou)
            dref[:, 2:4][clamp_active] = 0.0  # clamped sides are flat
            bbox_terms += values.sum()
            pending.append((v, t, aa, dref))
    if n_pos > 0:
        scale = 1.0 if cfg.bbox_reduction == "sum" else 1.0 / n_pos
        l_bbox = bbox_terms * scale
        for v, t, aa, dref in pending:
            grads[v][1][t, aa] += dref * scale
    else:
        l_bbox = 0.0

    # -- occurrence probability ---------------------------------------------
    if cfg.mode == "bce_hnm":
        neg_masks, k = mine_hard_negatives(probs_list, positive_list,
                                           cfg.neg_pos_ratio,
                                           cfg.hnm_min_negatives, valid_list)
        selected = [positive_list[v] | neg_masks[v] for v in range(n_videos)]
        n_neg_sampled = k
    else:
        selected = [valid_list[v][:, None] & np.ones_like(positive_list[v])
                    for v in range(n_videos)]
        n_neg_sampled = int(sum((sel & ~pos).sum()
                                for sel, pos in zip(selected, positive_list)))
    n_sel = int(sum(sel.sum() for sel in selected))
    if n_sel == 0:
        raise ValueError("empty anchor selection for probability loss")

    prob_terms = 0.0
    for v in range(n_videos):
        sel = selected[v]
        if not sel.any():
            continue
        p = np.asarray(probs_list[v], dtype=np.float64)[sel]
        y = positive_list[v][sel].astype(np.float64)
        if cfg.mode == "focal":
            prob_terms += focal_values(p, y, cfg.focal_gamma, cfg.focal_alpha).sum()
            dp = focal_grad(p, y, cfg.focal_gamma, cfg.focal_alpha)
        else:
            prob_terms += bce_values(p, y).sum()
            dp = bce_grad(p, y)
        grads[v][0][sel] += cfg.lambda_prob * dp / n_sel
    l_prob = prob_terms / n_sel

    total = l_bbox + cfg.lambda_prob * l_prob
    report = LossReport(l_bbox=float(l_bbox), l_prob=float(l_prob),
                        total=float(total), n_pos=n_pos,
                        n_neg_sampled=int(n_neg_sampled))
    return report, grads
