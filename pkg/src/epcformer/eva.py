"""Expression-visual attention: blending, expression-visual interaction, audio-text collaboration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoders import FeatureMap
from .nn import key_mask, merge_heads, split_heads

PROJECTIONS = ("w_v", "w_e", "w_vv", "w_ev", "w_aq", "w_ak", "w_av", "w_tq", "w_tk", "w_tv")


@dataclass
class EVAParams:
    # expression-visual interaction: query/key projections and value projections
    w_v: Tensor
    w_e: Tensor
    w_vv: Tensor
    w_ev: Tensor
    # audio-text collaboration
    w_aq: Tensor
    w_ak: Tensor
    w_av: Tensor
    w_tq: Tensor
    w_tk: Tensor
    w_tv: Tensor
    heads: int

    def __post_init__(self):
        c = self.w_v.shape[0]
        if c % self.heads:
            raise ValueError(f"width {c} not divisible by {self.heads} heads")
        for name in PROJECTIONS:
            if getattr(self, name).shape != (c, c):
                raise ag.ShapeError(f"{name} must be {c}x{c}, got {getattr(self, name).shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, C: int, heads: int) -> "EVAParams":
        bound = math.sqrt(6.0 / (2 * C))
        mats = {n: ag.parameter(rng.uniform(-bound, bound, (C, C)), n) for n in PROJECTIONS}
        return cls(heads=heads, **mats)

    def parameters(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in PROJECTIONS}


def _masked(x: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Zero the padded rows of x."""
    return ag.mul(x, (~pad_mask)[..., None].astype(np.float64))


def blend_expressions(f_text: FeatureMap | None, f_audio: FeatureMap | None) -> FeatureMap:
    """Sum of text and audio features; a missing modality contributes exact zeros."""
    if f_text is None and f_audio is None:
        raise ValueError("no expression: both text and audio are absent")
    if f_text is None or f_audio is None:
        only = f_text if f_text is not None else f_audio
        return FeatureMap(only.data, "blended", only.pad_mask.copy())
    if f_text.data.shape != f_audio.data.shape:
        raise ag.ShapeError(f"text {f_text.data.shape} and audio {f_audio.data.shape} shapes differ")
    return FeatureMap(ag.add(f_audio.data, f_text.data), "blended", f_text.pad_mask & f_audio.pad_mask)


def _cross(query_x: Tensor, query_w: Tensor, key_x: Tensor, key_w: Tensor, value_w: Tensor,
           heads: int, key_pad: np.ndarray | None) -> tuple[Tensor, Tensor]:
    q = split_heads(ag.matmul(query_x, query_w), heads)
    k = split_heads(ag.matmul(key_x, key_w), heads)
    v = split_heads(ag.matmul(key_x, value_w), heads)
    d_k = q.shape[-1]
    scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(d_k))
    weights = ag.softmax(scores, axis=-1, mask=key_mask(key_pad))
    return merge_heads(ag.matmul(weights, v)), weights


@dataclass
class EVIResult:
    f_v_prime: FeatureMap
    f_e_prime: FeatureMap
    visual_to_expr_weights: Tensor  # expression queries over visual keys
    expr_to_visual_weights: Tensor  # visual queries over expression keys


def evi(f_v: FeatureMap, f_e: FeatureMap, params: EVAParams) -> EVIResult:
    if f_v.data.shape[:-2] != f_e.data.shape[:-2] or f_v.width != f_e.width:
        raise ag.ShapeError(f"visual {f_v.data.shape} and expression {f_e.data.shape} incompatible")
    h = params.heads
    # expression rows gather visual evidence
    v2e, w_v2e = _cross(f_e.data, params.w_e, f_v.data, params.w_v, params.w_vv, h, None)
    # visual rows gather expression cues; padded expression rows are excluded as keys
    e2v, w_e2v = _cross(f_v.data, params.w_v, f_e.data, params.w_e, params.w_ev, h, f_e.pad_mask)
    f_v_prime = FeatureMap(ag.add(f_v.data, e2v), "visual", f_v.pad_mask, f_v.spatial_dims)
    f_e_prime = FeatureMap(_masked(ag.add(f_e.data, v2e), f_e.pad_mask), "blended", f_e.pad_mask)
    return EVIResult(f_v_prime, f_e_prime, w_v2e, w_e2v)


def evi_cross_attention(f_v: FeatureMap, f_e: FeatureMap, params: EVAParams) -> tuple[FeatureMap, FeatureMap]:
    r = evi(f_v, f_e, params)
    return r.f_v_prime, r.f_e_prime


def shared_attention_scores(f_audio: FeatureMap, f_text: FeatureMap,
                            params: EVAParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head self-attention logits of each stream and their sum: (A_a, A_t, A_e)."""
    if f_audio.data.shape != f_text.data.shape:
        raise ag.ShapeError(f"audio {f_audio.data.shape} and text {f_text.data.shape} shapes differ")
    h = params.heads
    d_k = f_audio.width // h

    def logits(x, wq, wk):
        q = split_heads(ag.matmul(x, wq), h)
        k = split_heads(ag.matmul(x, wk), h)
        return ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(d_k))

    a_a = logits(f_audio.data, params.w_aq, params.w_ak)
    a_t = logits(f_text.data, params.w_tq, params.w_tk)
    return a_a, a_t, ag.add(a_a, a_t)


@dataclass
class ATCResult:
    f_a_prime: FeatureMap
    f_t_prime: FeatureMap
    a_audio: Tensor
    a_text: Tensor
    a_shared: Tensor
    weights: Tensor


def atc(f_audio: FeatureMap, f_text: FeatureMap, params: EVAParams) -> ATCResult:
    """Audio and text refined by one shared attention matrix.

    Keys are excluded only where both streams are padded, so an absent
    modality (all rows padded, zero data) leaves the other untouched.
    """
    a_a, a_t, a_e = shared_attention_scores(f_audio, f_text, params)
    pad = f_audio.pad_mask & f_text.pad_mask
    weights = ag.softmax(a_e, axis=-1, mask=key_mask(pad))
    h = params.heads
    va = split_heads(ag.matmul(f_audio.data, params.w_av), h)
    vt = split_heads(ag.matmul(f_text.data, params.w_tv), h)
    fa = _masked(merge_heads(ag.matmul(weights, va)), pad)
    ft = _masked(merge_heads(ag.matmul(weights, vt)), pad)
    return ATCResult(FeatureMap(fa, "audio", pad), FeatureMap(ft, "text", pad), a_a, a_t, a_e, weights)


def atc_shared_attention(f_audio: FeatureMap, f_text: FeatureMap,
                         params: EVAParams) -> tuple[FeatureMap, FeatureMap]:
    r = atc(f_audio, f_text, params)
    return r.f_a_prime, r.f_t_prime


def fuse_referring(f_e_prime: FeatureMap, f_a_prime: FeatureMap, f_t_prime: FeatureMap) -> FeatureMap:
    """Element-wise sum of the interaction and collaboration outputs."""
    shapes = {f.data.shape for f in (f_e_prime, f_a_prime, f_t_prime)}
    if len(shapes) != 1:
        raise ag.ShapeError(f"fuse_referring needs equal shapes, got {sorted(shapes)}")
    data = ag.add(ag.add(f_e_prime.data, f_a_prime.data), f_t_prime.data)
    pad = f_e_prime.pad_mask & f_a_prime.pad_mask & f_t_prime.pad_mask
    return FeatureMap(data, "referring", pad)
