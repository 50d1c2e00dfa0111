"""The full network: encoders, alignment projection, EVA fusion, decoder and heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .alignment import ProjectionParams, inject_queries_weighted, project_pooled
from .autograd import Tensor
from .config import Config
from .encoders import EncoderParams, FeatureMap, encode_audio, encode_text, encode_visual
from .eva import EVAParams, atc, blend_expressions, evi, fuse_referring
from .head import (DecoderParams, HeadParams, box_head, decode, dynamic_mask_head_batch,
                   referring_score)


@dataclass
class ModelOutput:
    mask_logits: Tensor  # B x Q x H x W
    boxes: Tensor  # B x Q x 4
    ref_scores: Tensor  # B x Q
    f_ins: Tensor  # B x Q x C
    e_text: Tensor  # B x C
    e_audio: Tensor  # B x C
    has_text: np.ndarray
    has_audio: np.ndarray
    trace: dict = field(default_factory=dict, repr=False)


def safe_pool(f: FeatureMap) -> Tensor:
    """Mean over unpadded rows; fully padded maps pool to the zero vector."""
    valid = f.valid.astype(np.float64)
    count = np.maximum(valid.sum(axis=-1, keepdims=True), 1.0)
    w = (valid / count)[..., None, :]  # (..., 1, L)
    pooled = ag.matmul(Tensor(w), f.data)
    return ag.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))


class EPCFormer:
    def __init__(self, config: Config, seed: int | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        c = config
        self.encoder = EncoderParams.init(rng, c.C, c.L, c.P, c.height, c.width, c.audio_pool_stride)
        self.projection = ProjectionParams.init(rng, c.C, c.mlp_hidden, c.mlp_layers)
        self.eva = EVAParams.init(rng, c.C, c.heads)
        self.decoder = DecoderParams.init(rng, c.C, c.queries, c.decoder_layers, c.heads, c.ffn)
        self.head = HeadParams.init(rng, c.C, c.mask_channels)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, part in (("encoder", self.encoder), ("projection", self.projection),
                             ("eva", self.eva), ("decoder", self.decoder), ("head", self.head)):
            for k, v in part.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # ------------------------------------------------------------------
    def encode_expressions(self, text: Sequence, audio: Sequence) -> tuple[FeatureMap, FeatureMap]:
        """Batched text/audio maps; ``None`` entries become zero, fully padded rows."""
        f_t = encode_text([() if t is None else t for t in text], self.encoder)
        f_a = encode_audio([() if a is None else a for a in audio], self.encoder)
        return f_t, f_a

    def embed(self, f: FeatureMap) -> Tensor:
        """Projected expression embedding per batch row (B x C)."""
        return project_pooled(safe_pool(f), self.projection)

    def forward(self, frames: np.ndarray, text: Sequence | None = None, audio: Sequence | None = None,
                f_text: FeatureMap | None = None, f_audio: FeatureMap | None = None) -> ModelOutput:
        """Run B items. Each item gets one frame and optional text/audio token sequences.

        Pre-encoded maps may be passed instead of tokens (``f_text``/``f_audio``).
        A missing modality is represented by zero data with every row padded.
        """
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None]
        b = frames.shape[0]
        text = [None] * b if text is None else list(text)
        audio = [None] * b if audio is None else list(audio)
        if f_text is None or f_audio is None:
            enc_t, enc_a = self.encode_expressions(text, audio)
            f_text = enc_t if f_text is None else f_text
            f_audio = enc_a if f_audio is None else f_audio
        has_text = ~f_text.pad_mask.all(axis=-1)
        has_audio = ~f_audio.pad_mask.all(axis=-1)
        if np.any(~has_text & ~has_audio):
            raise ValueError("every item needs at least one expression modality")
        cfg = self.config

        f_v = encode_visual(frames, self.encoder)
        f_e = blend_expressions(f_text, f_audio)
        evi_out = evi(f_v, f_e, self.eva)
        atc_out = atc(f_audio, f_text, self.eva)
        f_r = fuse_referring(evi_out.f_e_prime, atc_out.f_a_prime, atc_out.f_t_prime)

        e_text = self.embed(f_text)
        e_audio = self.embed(f_audio)
        base = ag.add(self.decoder.query_table, Tensor(np.zeros((b, 1, cfg.C))))
        queries = inject_queries_weighted(base, e_text, e_audio, has_text, has_audio, cfg.eq)
        f_ins = decode(evi_out.f_v_prime, queries, self.decoder)

        ref = referring_score(f_ins, f_r)
        boxes = box_head(f_ins, self.head)
        masks = dynamic_mask_head_batch(f_ins, evi_out.f_v_prime, self.head, (cfg.height, cfg.width))
        trace = {"f_v": f_v, "f_e": f_e, "f_v_prime": evi_out.f_v_prime, "f_e_prime": evi_out.f_e_prime,
                 "a_audio": atc_out.a_audio, "a_text": atc_out.a_text, "a_shared": atc_out.a_shared,
                 "f_a_prime": atc_out.f_a_prime, "f_t_prime": atc_out.f_t_prime, "f_r_prime": f_r,
                 "queries": queries}
        return ModelOutput(masks, boxes, ref, f_ins, e_text, e_audio, has_text, has_audio, trace)
