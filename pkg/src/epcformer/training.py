"""Multi-task training: modality dropout, loss assembly and AdamW updates."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, TextIO

import numpy as np

from . import autograd as ag
from .alignment import build_alignment_batch, expression_contrastive_loss
from .autograd import Tape, Tensor
from .config import Config
from .data import VideoSample
from .losses import (LossWeights, NonFiniteLossError, assign_labels, loss_box, loss_emb,
                     loss_focal, loss_mask, total_loss)
from .model import EPCFormer

log = logging.getLogger(__name__)

MODES = ("text_only", "audio_only", "both")
TRAIN_MODES = {"mix": None, "text": "text_only", "audio": "audio_only"}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    weight_decay: float = 0.05
    steps: int = 10_000
    batch_size: int = 4
    frames_per_sample: int = 2
    seed: int = 0
    grad_clip: float = 1.0
    align_batch: int = 16

    def __post_init__(self):
        if self.lr < 0 or self.steps < 0:
            raise ValueError("learning rate and steps must be non-negative")

    @classmethod
    def from_config(cls, c: Config) -> "TrainConfig":
        return cls(c.lr, c.weight_decay, c.steps, c.batch_size, c.train_frames, c.seed,
                   c.grad_clip, c.align_batch)


def loss_weights(c: Config) -> LossWeights:
    return LossWeights(c.lambda_ref, c.lambda_box, c.lambda_mask, c.lambda_emb, c.lambda_expr)


def modality_dropout(sample: VideoSample | None, rng: np.random.Generator) -> str:
    """Uniform choice among text-only, audio-only and both."""
    return MODES[int(rng.integers(3))]


class AdamW:
    """Adam with decoupled weight decay on matrices and global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.05,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = 1.0):
        self.params = params
        self.lr, self.wd, self.betas, self.eps, self.clip = lr, weight_decay, betas, eps, clip
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> float:
        grads = {k: p.grad for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        factor = 1.0
        if self.clip and norm > self.clip:
            factor = self.clip / norm
        if self.lr == 0:
            return norm
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * factor
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1.0 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


@dataclass
class TrainItem:
    sample: int
    frame: int
    referred: int
    text: tuple | None
    audio: tuple | None
    mode: str


def pick_expression_pair(sample: VideoSample, oid: int, rng: np.random.Generator):
    """A text and an audio expression of the same paraphrase class of one object."""
    sems = sorted({e.semantic_id for e in sample.expressions if e.object_id == oid})
    sem = sems[int(rng.integers(len(sems)))]
    texts = [e for e in sample.expressions if e.semantic_id == sem and e.modality == "text"]
    audios = [e for e in sample.expressions if e.semantic_id == sem and e.modality == "audio"]
    return texts[int(rng.integers(len(texts)))].tokens, audios[int(rng.integers(len(audios)))].tokens


def sample_training_items(dataset: list[VideoSample], batch_size: int, frames_per_sample: int,
                          rng: np.random.Generator, fixed_mode: str | None = None) -> list[TrainItem]:
    """``batch_size`` scenes, each contributing ``frames_per_sample`` frames with shared expressions."""
    items = []
    picks = rng.choice(len(dataset), size=batch_size, replace=len(dataset) < batch_size)
    for si in picks:
        s = dataset[int(si)]
        t_count = s.frames.shape[0]
        frames = np.sort(rng.choice(t_count, size=min(frames_per_sample, t_count), replace=False))
        oid = int(rng.integers(len(s.scene.objects)))
        text, audio = pick_expression_pair(s, oid, rng)
        mode = fixed_mode or modality_dropout(s, rng)
        t = text if mode in ("text_only", "both") else None
        a = audio if mode in ("audio_only", "both") else None
        for f in frames:
            items.append(TrainItem(int(si), int(f), oid, t, a, mode))
    return items


def compute_losses(model: EPCFormer, dataset: list[VideoSample], items: list[TrainItem],
                   rng: np.random.Generator | None = None, with_expr: bool = True,
                   matchings: list[dict[int, int]] | None = None,
                   align_batch=None) -> tuple[dict[str, Tensor], list[dict[int, int]], dict]:
    """Forward the items and build every loss term.

    ``matchings`` (one dict per item) freezes the label assignment, which the
    gradient checks rely on; otherwise Hungarian matching runs on the outputs.
    """
    c = model.config
    frames = np.stack([dataset[it.sample].frames[it.frame] for it in items])
    out = model.forward(frames, [it.text for it in items], [it.audio for it in items])
    q = out.ref_scores.shape[1]
    cost_kw = dict(lambda_ref=c.lambda_ref, lambda_box=c.lambda_box, l1_weight=c.box_l1,
                   giou_weight=c.box_giou, alpha=c.focal_alpha, gamma=c.focal_gamma)
    if matchings is None:
        matchings = []
        for b, it in enumerate(items):
            s = dataset[it.sample]
            n = len(s.scene.objects)
            referred = np.arange(n) == it.referred
            matchings.append(assign_labels(out.ref_scores.data[b], out.boxes.data[b],
                                           s.gt_boxes[:, it.frame], referred, **cost_kw))

    ref_targets = np.zeros((len(items), q))
    bi, qi, gt_boxes, gt_masks = [], [], [], []
    for b, (it, m) in enumerate(zip(items, matchings)):
        s = dataset[it.sample]
        for oid, query in sorted(m.items()):
            bi.append(b)
            qi.append(query)
            gt_boxes.append(s.gt_boxes[oid, it.frame])
            gt_masks.append(s.gt_masks[oid, it.frame])
            if oid == it.referred:
                ref_targets[b, query] = 1.0
    sel = (np.array(bi), np.array(qi))
    diag: dict = {}
    parts = {"ref": loss_focal(out.ref_scores, ref_targets, c.focal_alpha, c.focal_gamma)}
    l1, giou = loss_box(ag.getitem(out.boxes, sel), np.array(gt_boxes), diag)
    parts["box"] = ag.add(ag.scale(l1, c.box_l1), ag.scale(giou, c.box_giou))
    parts["mask"] = loss_mask(ag.getitem(out.mask_logits, sel), np.array(gt_masks),
                              c.mask_focal, c.mask_dice, c.focal_alpha, c.focal_gamma)

    # cross-frame association: consecutive items of a scene share object ids
    emb_terms = []
    by_scene: dict[tuple[int, int], list[int]] = {}
    for b, it in enumerate(items):
        by_scene.setdefault((it.sample, b // max(1, c.train_frames)), []).append(b)
    for idx in by_scene.values():
        if len(idx) >= 2:
            b1, b2 = idx[0], idx[1]
            emb_terms.append(loss_emb(ag.getitem(out.f_ins, b1), ag.getitem(out.f_ins, b2),
                                      matchings[b1], matchings[b2], c.emb_tau))
    if emb_terms:
        emb = emb_terms[0]
        for t in emb_terms[1:]:
            emb = ag.add(emb, t)
        parts["emb"] = ag.scale(emb, 1.0 / len(emb_terms))

    if with_expr:
        if align_batch is None:
            align_batch = build_alignment_batch(dataset, c.align_batch, rng)
        f_a, f_t = align_batch.encode(model.encoder)
        parts["expr"] = expression_contrastive_loss(model.embed(f_a), model.embed(f_t), c.tau)
    diag["output"] = out
    return parts, matchings, diag


def train_step(model: EPCFormer, optimizer: AdamW, dataset: list[VideoSample],
               rng: np.random.Generator, step: int = 0, mode: str = "mix") -> dict:
    """One optimization step; returns a log record."""
    c = model.config
    fixed = TRAIN_MODES[mode]
    items = sample_training_items(dataset, c.batch_size, c.train_frames, rng, fixed)
    model.zero_grad()
    with Tape() as tape:
        try:
            parts, _, diag = compute_losses(model, dataset, items, rng, with_expr=fixed is None)
            loss = total_loss(parts, loss_weights(c))
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"step {step}: {exc}") from None
    tape.backward(loss)
    grad_norm = optimizer.step()
    record = {"step": step, "modes": [it.mode for it in items[::max(1, c.train_frames)]],
              "total": loss.item(), "grad_norm": grad_norm}
    for k, v in parts.items():
        record[k] = v.item()
    if diag.get("degenerate_boxes"):
        record["degenerate_boxes"] = diag["degenerate_boxes"]
    return record


def train(model: EPCFormer, dataset: list[VideoSample], mode: str = "mix", steps: int | None = None,
          log_stream: TextIO | None = None, callback: Callable[[dict], None] | None = None) -> AdamW:
    """Run the configured number of steps; records go to ``log_stream`` as JSON lines."""
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    c = model.config
    rng = np.random.default_rng(c.seed + 1)
    optimizer = AdamW(model.parameters(), c.lr, c.weight_decay, clip=c.grad_clip)
    total = c.steps if steps is None else steps
    for step in range(total):
        record = train_step(model, optimizer, dataset, rng, step, mode)
        if log_stream is not None:
            log_stream.write(json.dumps(record, sort_keys=True) + "\n")
        if callback is not None:
            callback(record)
        if step % 100 == 0:
            log.info("step %d total %.4f", step, record["total"])
    return optimizer
