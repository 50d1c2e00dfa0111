"""Loss terms and Hungarian label assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autograd as ag
from .autograd import Tensor
from .head import box_cxcywh_to_xyxy

GIOU_AREA_EPS = 1e-9


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    ref: float = 2.0
    box: float = 1.0
    mask: float = 1.0
    emb: float = 1.0
    expr: float = 1.0

    def __post_init__(self):
        for k in ("ref", "box", "mask", "emb", "expr"):
            v = getattr(self, k)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k}={v} must be finite and non-negative")


def focal_terms(logits: np.ndarray, target: float, alpha: float, gamma: float) -> np.ndarray:
    """Element-wise focal loss (numpy) of predicting ``target`` from logits."""
    x = np.asarray(logits, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-x))
    log_p = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    log_1mp = np.minimum(-x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    if target:
        return -alpha * (1.0 - p) ** gamma * log_p
    return -(1.0 - alpha) * p ** gamma * log_1mp


def loss_focal(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean sigmoid focal loss over all entries; targets in {0, 1}."""
    t = np.asarray(targets, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("focal targets must be 0 or 1")
    ce = ag.scale(ag.add(ag.mul(ag.log_sigmoid(logits), t),
                         ag.mul(ag.log_sigmoid(ag.scale(logits, -1.0)), 1.0 - t)), -1.0)
    loss = ag.mul(ce, alpha * t + (1.0 - alpha) * (1.0 - t))
    if gamma != 0:
        p = ag.sigmoid(logits)
        # 1 - p_t = p for negatives, 1 - p for positives
        one_minus_pt = ag.add(ag.mul(p, 1.0 - 2.0 * t), t)
        loss = ag.mul(loss, ag.power(one_minus_pt, gamma))
    return ag.mean(loss)


def _xyxy(b: Tensor):
    cx, cy = ag.getitem(b, (Ellipsis, 0)), ag.getitem(b, (Ellipsis, 1))
    hw, hh = ag.scale(ag.getitem(b, (Ellipsis, 2)), 0.5), ag.scale(ag.getitem(b, (Ellipsis, 3)), 0.5)
    return ag.sub(cx, hw), ag.sub(cy, hh), ag.add(cx, hw), ag.add(cy, hh)


def loss_box(pred: Tensor, gt: np.ndarray, diagnostics: dict | None = None) -> tuple[Tensor, Tensor]:
    """Mean L1 (summed over the 4 coordinates) and mean 1 - GIoU over K box pairs."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ag.ShapeError(f"box shapes {pred.shape} and {gt.shape} differ")
    k = max(int(np.prod(pred.shape[:-1])), 1)
    l1 = ag.scale(ag.sum_(ag.absolute(ag.sub(pred, gt))), 1.0 / k)

    px0, py0, px1, py1 = _xyxy(pred)
    g = box_cxcywh_to_xyxy(gt)
    gx0, gy0, gx1, gy1 = g[..., 0], g[..., 1], g[..., 2], g[..., 3]
    iw = ag.relu(ag.sub(ag.minimum(px1, gx1), ag.maximum(px0, gx0)))
    ih = ag.relu(ag.sub(ag.minimum(py1, gy1), ag.maximum(py0, gy0)))
    inter = ag.mul(iw, ih)
    raw_area = ag.mul(ag.sub(px1, px0), ag.sub(py1, py0))
    if diagnostics is not None:
        diagnostics["degenerate_boxes"] = int(np.sum(raw_area.data < GIOU_AREA_EPS))
    area_p = ag.maximum(raw_area, GIOU_AREA_EPS)
    area_g = np.maximum((gx1 - gx0) * (gy1 - gy0), GIOU_AREA_EPS)
    union = ag.sub(ag.add(area_p, area_g), inter)
    iou = ag.div(inter, union)
    ew = ag.sub(ag.maximum(px1, gx1), ag.minimum(px0, gx0))
    eh = ag.sub(ag.maximum(py1, gy1), ag.minimum(py0, gy0))
    enclose = ag.maximum(ag.mul(ew, eh), GIOU_AREA_EPS)
    giou = ag.sub(iou, ag.div(ag.sub(enclose, union), enclose))
    giou_loss = ag.scale(ag.sum_(ag.sub(1.0, giou)), 1.0 / k)
    return l1, giou_loss


def giou_numpy(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(IoU, GIoU) of two (cx, cy, w, h) boxes."""
    a, b = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    aa = max((a[2] - a[0]) * (a[3] - a[1]), GIOU_AREA_EPS)
    ab = max((b[2] - b[0]) * (b[3] - b[1]), GIOU_AREA_EPS)
    union = aa + ab - inter
    enc = max((max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1])), GIOU_AREA_EPS)
    iou = inter / union
    return iou, iou - (enc - union) / enc


def loss_mask(logits: Tensor, gt: np.ndarray, focal_weight: float = 1.0, dice_weight: float = 1.0,
              alpha: float = 0.25, gamma: float = 2.0, smooth: float = 1.0) -> Tensor:
    """Pixel focal loss plus dice loss, averaged over the leading instance axis."""
    gt = np.asarray(gt, dtype=np.float64)
    if logits.shape != gt.shape:
        raise ag.ShapeError(f"mask shapes {logits.shape} and {gt.shape} differ")
    focal = loss_focal(logits, gt, alpha, gamma)
    p = ag.sigmoid(logits)
    axes = (-2, -1)
    inter = ag.sum_(ag.mul(p, gt), axis=axes)
    denom = ag.add(ag.sum_(p, axis=axes), gt.sum(axis=axes) + smooth)
    dice = ag.sub(1.0, ag.div(ag.add(ag.scale(inter, 2.0), smooth), denom))
    return ag.add(ag.scale(focal, focal_weight), ag.scale(ag.mean(dice), dice_weight))


def info_nce(x: Tensor, y: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over cosine similarity; row i of x pairs with row i of y."""
    n = x.shape[0]
    sim = ag.scale(ag.cosine_matrix(x, y), 1.0 / tau)
    diag = (np.arange(n), np.arange(n))
    a = ag.getitem(ag.log_softmax(sim, axis=1), diag)
    b = ag.getitem(ag.log_softmax(sim, axis=0), diag)
    return ag.scale(ag.add(ag.sum_(a), ag.sum_(b)), -1.0 / (2 * n))


def loss_emb(f_ins_frame1: Tensor, f_ins_frame2: Tensor, matching1: dict[int, int],
             matching2: dict[int, int], tau: float = 0.07) -> Tensor:
    """Cross-frame InfoNCE between instance features matched to the same object.

    ``matching*`` map object id -> query index in that frame. Objects
    matched in only one frame are ignored; with fewer than two shared
    objects there are no negatives and the loss is zero.
    """
    common = sorted(set(matching1) & set(matching2))
    if len(common) < 2:
        return Tensor(0.0)
    q1 = np.array([matching1[o] for o in common])
    q2 = np.array([matching2[o] for o in common])
    return info_nce(ag.getitem(f_ins_frame1, q1), ag.getitem(f_ins_frame2, q2), tau)


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of the five terms; absent terms count as zero."""
    total = Tensor(0.0)
    for key in ("ref", "box", "mask", "emb", "expr"):
        part = parts.get(key)
        if part is None:
            continue
        if not np.all(np.isfinite(part.data)):
            raise NonFiniteLossError(f"loss term {key!r} is not finite")
        total = ag.add(total, ag.scale(part, getattr(weights, key)))
    return total


# ---------------------------------------------------------------------------
# label assignment

def matching_cost(ref_logits: np.ndarray, pred_boxes: np.ndarray, gt_boxes: np.ndarray,
                  referred: np.ndarray, lambda_ref: float = 2.0, lambda_box: float = 1.0,
                  l1_weight: float = 5.0, giou_weight: float = 2.0, alpha: float = 0.25,
                  gamma: float = 2.0) -> np.ndarray:
    """Cost matrix (objects x queries).

    Classification cost is the focal loss of giving the query the object's
    label (referred -> 1, other objects -> 0).
    """
    ref_logits = np.asarray(ref_logits, dtype=np.float64)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    n, q = gt_boxes.shape[0], ref_logits.shape[0]
    pos = focal_terms(ref_logits, 1, alpha, gamma)
    neg = focal_terms(ref_logits, 0, alpha, gamma)
    cls = np.where(np.asarray(referred, bool)[:, None], pos[None, :], neg[None, :])
    l1 = np.abs(gt_boxes[:, None, :] - pred_boxes[None, :, :]).sum(-1)
    giou = np.array([[giou_numpy(gt_boxes[i], pred_boxes[j])[1] for j in range(q)] for i in range(n)])
    return lambda_ref * cls + lambda_box * (l1_weight * l1 + giou_weight * (1.0 - giou))


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment rows -> columns, as sorted (row, col) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape[0] > cost.shape[1]:
        raise ValueError(f"{cost.shape[0]} objects exceed {cost.shape[1]} queries")
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def assign_labels(ref_logits: np.ndarray, pred_boxes: np.ndarray, gt_boxes: np.ndarray,
                  referred: np.ndarray, **cost_kw) -> dict[int, int]:
    """Object id -> query index; unmatched queries are background."""
    gt_boxes = np.asarray(gt_boxes)
    if gt_boxes.shape[0] > np.asarray(ref_logits).shape[0]:
        raise ValueError(f"{gt_boxes.shape[0]} objects exceed {len(ref_logits)} queries")
    if gt_boxes.shape[0] == 0:
        return {}
    cost = matching_cost(ref_logits, pred_boxes, gt_boxes, referred, **cost_kw)
    if not np.all(np.isfinite(cost)):
        raise NonFiniteLossError("matching cost is not finite")
    return {r: c for r, c in hungarian(cost)}
