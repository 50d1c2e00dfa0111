"""Small layer helpers built on :mod:`epcformer.autograd`."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return ag.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name)


def zeros(*shape: int, name: str | None = None) -> Tensor:
    return ag.parameter(np.zeros(shape), name)


def ones(*shape: int, name: str | None = None) -> Tensor:
    return ag.parameter(np.ones(shape), name)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ag.matmul(x, w)
    return y if b is None else ag.add(y, b)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, C) -> (..., heads, L, C/heads)."""
    *lead, length, width = x.shape
    y = ag.reshape(x, (*lead, length, heads, width // heads))
    n = len(lead)
    return ag.transpose(y, (*range(n), n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, L, d) -> (..., L, heads*d)."""
    *lead, heads, length, d = x.shape
    n = len(lead)
    y = ag.transpose(x, (*range(n), n + 1, n, n + 2))
    return ag.reshape(y, (*lead, length, heads * d))


def key_mask(pad_mask: np.ndarray | None) -> np.ndarray | None:
    """Padding mask (..., Lk) broadcastable against (..., heads, Lq, Lk) scores."""
    if pad_mask is None:
        return None
    return np.asarray(pad_mask, dtype=bool)[..., None, None, :]


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
              pad_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention on already projected inputs.

    Returns the merged output (..., Lq, C) and the weights (..., heads, Lq, Lk).
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    d_k = qh.shape[-1]
    scores = ag.scale(ag.matmul(qh, ag.transpose(kh)), 1.0 / math.sqrt(d_k))
    weights = ag.softmax(scores, axis=-1, mask=key_mask(pad_mask))
    return merge_heads(ag.matmul(weights, vh)), weights


def sinusoidal_table(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(width // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)[:, : width - width // 2]
    return table


def sinusoidal_2d(rows: int, cols: int, width: int) -> np.ndarray:
    """Half the channels encode the row, half the column; flattened row-major."""
    half = width // 2
    r = sinusoidal_table(rows, half)
    c = sinusoidal_table(cols, width - half)
    grid = np.concatenate([np.repeat(r[:, None, :], cols, axis=1),
                           np.repeat(c[None, :, :], rows, axis=0)], axis=-1)
    return grid.reshape(rows * cols, width)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``n_out x n_in`` interpolation weights with half-pixel centers."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m
