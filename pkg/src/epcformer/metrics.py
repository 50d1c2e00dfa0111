"""Segmentation metrics: J, F, J&F, Precision@K, overall/mean IoU and COCO-style mAP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

PRECISION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
# mask IoU thresholds 0.50:0.05:0.95, written as exact decimals
MAP_THRESHOLDS = tuple(k / 100 for k in range(50, 100, 5))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes {pred.shape} and {gt.shape} differ")
    return pred, gt


def region_similarity(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1 when both masks are empty."""
    pred, gt = _check_pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels removed by a 3x3 erosion (outside the image counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), border_value=0)
    return mask & ~eroded


def default_tolerance(shape: tuple[int, int]) -> int:
    return max(1, int(round(0.008 * math.hypot(*shape))))


def _within(src: np.ndarray, dst: np.ndarray, tol: float) -> np.ndarray:
    """Pixels of ``src`` with some ``dst`` pixel at Euclidean distance <= tol."""
    if not dst.any():
        return np.zeros_like(src)
    dist = ndimage.distance_transform_edt(~dst)
    return src & (dist <= tol)


def contour_accuracy(pred: np.ndarray, gt: np.ndarray, tolerance_px: float | None = None) -> float:
    """Boundary F-measure between two binary masks."""
    pred, gt = _check_pair(pred, gt)
    tol = default_tolerance(gt.shape) if tolerance_px is None else tolerance_px
    pb, gb = boundary(pred), boundary(gt)
    n_p, n_g = pb.sum(), gb.sum()
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = _within(pb, gb, tol).sum() / n_p
    recall = _within(gb, pb, tol).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def precision_at_k(ious: Sequence[float], k: float) -> float:
    """Fraction of samples whose IoU strictly exceeds ``k``."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("precision_at_k of an empty list")
    return float(np.mean(ious > k))


def aggregate_iou(intersections: Sequence[float], unions: Sequence[float]) -> tuple[float, float]:
    """(overall, mean) IoU; a sample with empty union has IoU 1."""
    inter = np.asarray(intersections, dtype=np.float64)
    union = np.asarray(unions, dtype=np.float64)
    if inter.size == 0:
        raise ValueError("aggregate_iou of an empty list")
    total = union.sum()
    overall = 1.0 if total == 0 else float(inter.sum() / total)
    per = np.divide(inter, union, out=np.ones_like(inter), where=union > 0)
    return overall, float(per.mean())


@dataclass
class ScoredMask:
    score: float
    mask: np.ndarray


def average_precision(predictions: Sequence[Sequence[ScoredMask]],
                      ground_truths: Sequence[Sequence[np.ndarray]], threshold: float) -> float:
    """101-point interpolated AP at one mask-IoU threshold, pooled over images."""
    n_gt = sum(len(g) for g in ground_truths)
    if n_gt == 0:
        raise ValueError("average precision needs at least one ground truth")
    flat = [(p.score, img, j) for img, preds in enumerate(predictions) for j, p in enumerate(preds)]
    if not flat:
        return 0.0
    flat.sort(key=lambda x: (-x[0], x[1], x[2]))
    taken = [np.zeros(len(g), dtype=bool) for g in ground_truths]
    tp = np.zeros(len(flat))
    for r, (_, img, j) in enumerate(flat):
        best, best_iou = -1, threshold
        for gi, g in enumerate(ground_truths[img]):
            if taken[img][gi]:
                continue
            iou = region_similarity(predictions[img][j].mask, g)
            if iou >= best_iou:
                if best < 0 or iou > best_iou:
                    best, best_iou = gi, iou
        if best >= 0:
            taken[img][best] = True
            tp[r] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(flat) + 1)
    # tied scores form one operating point, so sample order cannot matter
    scores = np.array([f[0] for f in flat])
    last = np.append(scores[1:] != scores[:-1], True)
    recall, precision = recall[last], precision[last]
    # monotone envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for rp in RECALL_POINTS:
        idx = np.searchsorted(recall, rp, side="left")
        ap += envelope[idx] if idx < len(recall) else 0.0
    return float(ap / len(RECALL_POINTS))


def mean_average_precision(predictions, ground_truths, thresholds=MAP_THRESHOLDS) -> float:
    """COCO-style mAP: AP averaged over mask-IoU thresholds 0.50:0.05:0.95."""
    return float(np.mean([average_precision(predictions, ground_truths, t) for t in thresholds]))


@dataclass
class MetricsReport:
    J: float
    F: float
    JF: float
    precision_at: dict[float, float] = field(default_factory=dict)
    overall_iou: float = 0.0
    mean_iou: float = 0.0
    mAP: float = 0.0
    count: int = 0

    def to_text(self) -> str:
        rows = [("J", self.J), ("F", self.F), ("JF", self.JF)]
        rows += [(f"P@{k:.1f}", v) for k, v in sorted(self.precision_at.items())]
        rows += [("overall_iou", self.overall_iou), ("mean_iou", self.mean_iou), ("mAP", self.mAP)]
        lines = [f"{k}={v:.6f}" for k, v in rows]
        lines.append(f"count={self.count}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        vals = dict(line.split("=", 1) for line in text.split() if "=" in line)
        prec = {float(k[2:]): float(v) for k, v in vals.items() if k.startswith("P@")}
        return cls(float(vals["J"]), float(vals["F"]), float(vals["JF"]), prec,
                   float(vals["overall_iou"]), float(vals["mean_iou"]), float(vals["mAP"]),
                   int(vals.get("count", 0)))


def build_report(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray],
                 scored: Sequence[Sequence[ScoredMask]] | None = None,
                 tolerance_px: float | None = None) -> MetricsReport:
    """Metrics over paired per-frame predictions and references.

    ``scored`` holds the ranked candidates per frame for mAP; without it
    the binary prediction is used with score 1.
    """
    if len(pred_masks) != len(gt_masks) or not len(gt_masks):
        raise ValueError("need equally many (and at least one) predictions and references")
    js, fs, inters, unions = [], [], [], []
    for p, g in zip(pred_masks, gt_masks):
        p, g = _check_pair(p, g)
        js.append(region_similarity(p, g))
        fs.append(contour_accuracy(p, g, tolerance_px))
        inters.append(np.logical_and(p, g).sum())
        unions.append(np.logical_or(p, g).sum())
    j, f = float(np.mean(js)), float(np.mean(fs))
    overall, mean_iou = aggregate_iou(inters, unions)
    if scored is None:
        scored = [[ScoredMask(1.0, np.asarray(p, bool))] for p in pred_masks]
    gts = [[np.asarray(g, bool)] for g in gt_masks]
    return MetricsReport(
        J=j, F=f, JF=(j + f) / 2,
        precision_at={k: precision_at_k(js, k) for k in PRECISION_THRESHOLDS},
        overall_iou=overall, mean_iou=mean_iou,
        mAP=mean_average_precision(scored, gts), count=len(js))
