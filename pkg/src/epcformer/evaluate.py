"""Inference and held-out evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .alignment import build_alignment_batch
from .autograd import cosine_matrix
from .data import VideoSample
from .head import Prediction, nms_filter
from .metrics import MetricsReport, ScoredMask, build_report
from .model import EPCFormer

MODALITIES = ("text", "audio", "both")


@dataclass(frozen=True)
class EvalItem:
    sample: int
    object_id: int
    semantic_id: int
    frame: int
    text: tuple | None
    audio: tuple | None


def heldout_split(dataset: list[VideoSample], heldout: int) -> tuple[list[VideoSample], list[VideoSample]]:
    """(train, held-out); the held-out scenes are the last ``heldout``."""
    if not 0 < heldout < len(dataset):
        raise ValueError(f"held-out size {heldout} must lie in (0, {len(dataset)})")
    return dataset[:-heldout], dataset[-heldout:]


def expression_for(sample: VideoSample, semantic_id: int, modality: str, variant: int = 0) -> tuple:
    exprs = [e for e in sample.expressions if e.semantic_id == semantic_id and e.modality == modality]
    if not exprs:
        raise KeyError(f"no {modality} expression with semantic id {semantic_id}")
    return exprs[variant % len(exprs)].tokens


def eval_items(samples: Sequence[VideoSample], modality: str) -> list[EvalItem]:
    """One item per (scene, paraphrase class, frame), using the first variant of each modality."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    items = []
    for si, s in enumerate(samples):
        for sem in sorted({e.semantic_id for e in s.expressions}):
            oid = next(e.object_id for e in s.expressions if e.semantic_id == sem)
            t = expression_for(s, sem, "text") if modality in ("text", "both") else None
            a = expression_for(s, sem, "audio") if modality in ("audio", "both") else None
            for f in range(s.frames.shape[0]):
                items.append(EvalItem(si, oid, sem, f, t, a))
    return items


def predictions_from_output(mask_logits: np.ndarray, boxes: np.ndarray, ref: np.ndarray) -> list[Prediction]:
    return [Prediction(q, mask_logits[q], boxes[q], float(ref[q])) for q in range(ref.shape[0])]


def select_mask(preds: list[Prediction], nms_iou: float = 0.7, score_threshold: float = 0.5) -> np.ndarray:
    """Union of the binarized masks kept by NMS above the score threshold.

    Falls back to the single best-scoring query when nothing clears it.
    """
    kept = nms_filter(preds, nms_iou, score_threshold)
    if not kept:
        kept = [min(preds, key=lambda p: (-p.ref_score, p.query_id))]
    out = np.zeros(preds[0].mask_logits.shape, dtype=bool)
    for p in kept:
        out |= p.mask_logits > 0.0  # sigmoid > 0.5
    return out


def ranked_masks(preds: list[Prediction], nms_iou: float = 0.7) -> list[ScoredMask]:
    return [ScoredMask(p.score, p.mask_logits > 0.0) for p in nms_filter(preds, nms_iou, 0.0)]


def predict(model: EPCFormer, frames: np.ndarray, text: Sequence, audio: Sequence,
            batch: int = 64) -> tuple[list[np.ndarray], list[list[ScoredMask]]]:
    """Binary referred masks and ranked candidates for each (frame, expression) item."""
    c = model.config
    masks, ranked = [], []
    for lo in range(0, len(frames), batch):
        hi = min(lo + batch, len(frames))
        out = model.forward(frames[lo:hi], text[lo:hi], audio[lo:hi])
        ml, bx, rf = out.mask_logits.data, out.boxes.data, out.ref_scores.data
        for b in range(hi - lo):
            preds = predictions_from_output(ml[b], bx[b], rf[b])
            masks.append(select_mask(preds, c.nms_iou, c.score_threshold))
            ranked.append(ranked_masks(preds, c.nms_iou))
    return masks, ranked


def evaluate(model: EPCFormer, samples: Sequence[VideoSample], modality: str,
             batch: int = 64) -> MetricsReport:
    """Metrics for one inference modality over every referring expression in ``samples``."""
    items = eval_items(samples, modality)
    frames = np.stack([samples[it.sample].frames[it.frame] for it in items])
    masks, ranked = predict(model, frames, [it.text for it in items], [it.audio for it in items], batch)
    gts = [samples[it.sample].gt_masks[it.object_id, it.frame] for it in items]
    return build_report(masks, gts, ranked)


def retrieval_accuracy(model: EPCFormer, dataset: list[VideoSample], batch_size: int = 16,
                       batches: int = 8, seed: int = 0) -> float:
    """Top-1 audio -> text retrieval accuracy over random batches with distinct expressions."""
    rng = np.random.default_rng(seed)
    hits = total = 0
    for _ in range(batches):
        ab = build_alignment_batch(dataset, batch_size, rng)
        f_a, f_t = ab.encode(model.encoder)
        sim = cosine_matrix(model.embed(f_a), model.embed(f_t)).data
        hits += int(np.sum(np.argmax(sim, axis=1) == np.arange(sim.shape[0])))
        total += sim.shape[0]
    return hits / total

