"""Toy visual, text and audio encoders emitting ``L x C`` feature maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import PHONEMES, TEXT_VOCAB
from .nn import sinusoidal_2d, sinusoidal_table

ROLES = ("visual", "text", "audio", "blended", "referring")


@dataclass
class FeatureMap:
    data: Tensor  # (..., L, C)
    role: str
    pad_mask: np.ndarray  # (..., L), True = padded
    spatial_dims: tuple[int, int] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown feature role {self.role!r}")
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if self.pad_mask.shape != self.data.shape[:-1]:
            raise ag.ShapeError(f"pad mask {self.pad_mask.shape} does not match data {self.data.shape}")

    @property
    def length(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def valid(self) -> np.ndarray:
        return ~self.pad_mask

    @classmethod
    def absent(cls, like: "FeatureMap", role: str) -> "FeatureMap":
        """Zero data with every row padded: a missing modality."""
        return cls(Tensor(np.zeros(like.data.shape)), role, np.ones(like.pad_mask.shape, bool))


@dataclass
class EncoderParams:
    patch_projection: Tensor  # (P*P*3) x C
    text_embedding: Tensor  # V_text x C
    audio_embedding: Tensor  # V_audio x C
    visual_pos: np.ndarray  # L_v x C, fixed
    text_pos: np.ndarray  # L x C, fixed
    audio_pos: np.ndarray  # L x C, fixed
    patch: int
    length: int
    audio_pool_stride: int

    @classmethod
    def init(cls, rng: np.random.Generator, C: int, L: int, P: int, height: int, width: int,
             audio_pool_stride: int = 3, text_vocab: int = len(TEXT_VOCAB),
             audio_vocab: int = len(PHONEMES)) -> "EncoderParams":
        if height % P or width % P:
            raise ValueError(f"frame {height}x{width} not divisible by patch size {P}")
        fan_in = P * P * 3
        bound = np.sqrt(6.0 / (fan_in + C))
        return cls(
            patch_projection=ag.parameter(rng.uniform(-bound, bound, (fan_in, C)), "patch_projection"),
            text_embedding=ag.parameter(rng.normal(0.0, 1.0, (text_vocab, C)), "text_embedding"),
            audio_embedding=ag.parameter(rng.normal(0.0, 1.0, (audio_vocab, C)), "audio_embedding"),
            visual_pos=sinusoidal_2d(height // P, width // P, C),
            text_pos=sinusoidal_table(L, C),
            audio_pos=sinusoidal_table(L, C),
            patch=P, length=L, audio_pool_stride=audio_pool_stride,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"patch_projection": self.patch_projection, "text_embedding": self.text_embedding,
                "audio_embedding": self.audio_embedding}

    def zero_positions(self) -> None:
        self.visual_pos = np.zeros_like(self.visual_pos)
        self.text_pos = np.zeros_like(self.text_pos)
        self.audio_pos = np.zeros_like(self.audio_pos)


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, 3) uint8 -> (..., L_v, P*P*3) floats in [0, 1]."""
    *lead, h, w, ch = frames.shape
    if h % patch or w % patch:
        raise ValueError(f"frame {h}x{w} not divisible by patch size {patch}")
    x = np.asarray(frames, dtype=np.float64) / 255.0
    x = x.reshape(*lead, h // patch, patch, w // patch, patch, ch)
    n = len(lead)
    x = np.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(*lead, (h // patch) * (w // patch), patch * patch * ch)


def encode_visual(frames: np.ndarray, params: EncoderParams) -> FeatureMap:
    """One frame (H, W, 3) or a batch (B, H, W, 3) -> visual FeatureMap."""
    p = params.patch
    patches = patchify(frames, p)
    h, w = frames.shape[-3] // p, frames.shape[-2] // p
    if params.visual_pos.shape[0] != h * w:
        raise ag.ShapeError(f"positional table has {params.visual_pos.shape[0]} rows, frame gives {h * w}")
    data = ag.add(ag.matmul(Tensor(patches), params.patch_projection), params.visual_pos)
    return FeatureMap(data, "visual", np.zeros(patches.shape[:-1], bool), (h, w))


def _id_matrix(seqs: Sequence[Sequence[int]], length: int, vocab: int, kind: str):
    ids = np.zeros((len(seqs), length), dtype=np.int64)
    valid = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        s = list(s)[:length]
        for t in s:
            if not 0 <= t < vocab:
                raise ValueError(f"{kind} token id {t} outside vocabulary of size {vocab}")
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
    return ids, valid


def _batched(tokens) -> tuple[list, bool]:
    if len(tokens) and not np.isscalar(tokens[0]):
        return [list(t) for t in tokens], True
    return [list(tokens)], False


def encode_text(tokens, params: EncoderParams) -> FeatureMap:
    """Token ids (or a list of sequences) -> text FeatureMap padded to ``L`` rows."""
    seqs, batched = _batched(tokens)
    length = params.length
    ids, valid = _id_matrix(seqs, length, params.text_embedding.shape[0], "text")
    data = ag.embedding(params.text_embedding, ids, valid)
    data = ag.add(data, params.text_pos[None] * valid[..., None])
    fm = FeatureMap(data, "text", ~valid)
    return fm if batched else _unbatch(fm)


def audio_pool_matrix(lengths: Sequence[int], stride: int, length: int, max_tokens: int):
    """Averaging weights mapping raw tokens to pooled rows, plus row validity."""
    w = np.zeros((len(lengths), length, max_tokens))
    valid = np.zeros((len(lengths), length), dtype=bool)
    for i, n in enumerate(lengths):
        rows = min(-(-n // stride), length)
        for r in range(rows):
            lo, hi = r * stride, min((r + 1) * stride, n)
            w[i, r, lo:hi] = 1.0 / (hi - lo)
            valid[i, r] = True
    return w, valid


def encode_audio(tokens, params: EncoderParams) -> FeatureMap:
    """Phoneme ids -> embedded, stride-pooled, padded audio FeatureMap."""
    seqs, batched = _batched(tokens)
    stride = params.audio_pool_stride
    if stride < 1:
        raise ValueError("audio_pool_stride must be >= 1")
    vocab = params.audio_embedding.shape[0]
    max_tokens = max([len(s) for s in seqs] + [1])
    ids, tok_valid = _id_matrix(seqs, max_tokens, vocab, "audio")
    emb = ag.embedding(params.audio_embedding, ids, tok_valid)
    pool, valid = audio_pool_matrix([len(s) for s in seqs], stride, params.length, max_tokens)
    data = ag.add(ag.matmul(Tensor(pool), emb), params.audio_pos[None] * valid[..., None])
    fm = FeatureMap(data, "audio", ~valid)
    return fm if batched else _unbatch(fm)


def _unbatch(fm: FeatureMap) -> FeatureMap:
    return FeatureMap(ag.reshape(fm.data, fm.data.shape[1:]), fm.role, fm.pad_mask[0], fm.spatial_dims)
