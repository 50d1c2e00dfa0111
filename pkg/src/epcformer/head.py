"""Query decoder, referring score, dynamic mask head, box head and NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoders import FeatureMap
from .nn import attention, bilinear_matrix, linear

LAYER_KEYS = ("ln1_g", "ln1_b", "sa_q", "sa_k", "sa_v", "sa_o",
              "ln2_g", "ln2_b", "ca_q", "ca_k", "ca_v", "ca_o",
              "ln3_g", "ln3_b", "ff_w1", "ff_b1", "ff_w2", "ff_b2")


def _uniform(rng, fan_in, fan_out, name):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return ag.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), name)


@dataclass
class DecoderParams:
    query_table: Tensor  # Q x C
    layers: list[dict[str, Tensor]]
    heads: int

    @classmethod
    def init(cls, rng: np.random.Generator, C: int, queries: int, num_layers: int, heads: int,
             ffn: int) -> "DecoderParams":
        layers = []
        for i in range(num_layers):
            p = {}
            for ln in ("ln1", "ln2", "ln3"):
                p[f"{ln}_g"] = ag.parameter(np.ones(C))
                p[f"{ln}_b"] = ag.parameter(np.zeros(C))
            for blk in ("sa", "ca"):
                for m in "qkvo":
                    p[f"{blk}_{m}"] = _uniform(rng, C, C, f"{blk}_{m}")
            p["ff_w1"] = _uniform(rng, C, ffn, "ff_w1")
            p["ff_b1"] = ag.parameter(np.zeros(ffn))
            p["ff_w2"] = _uniform(rng, ffn, C, "ff_w2")
            p["ff_b2"] = ag.parameter(np.zeros(C))
            layers.append(p)
        table = ag.parameter(rng.normal(0.0, 1.0, (queries, C)), "query_table")
        return cls(table, layers, heads)

    @property
    def num_queries(self) -> int:
        return self.query_table.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {"query_table": self.query_table}
        for i, p in enumerate(self.layers):
            for k in LAYER_KEYS:
                out[f"layer{i}.{k}"] = p[k]
        return out


def decoder_layer(x: Tensor, memory: Tensor, p: dict[str, Tensor], heads: int) -> Tensor:
    """Pre-norm block: self-attention, cross-attention over ``memory``, feed-forward."""
    h = ag.layer_norm(x, p["ln1_g"], p["ln1_b"])
    sa, _ = attention(ag.matmul(h, p["sa_q"]), ag.matmul(h, p["sa_k"]), ag.matmul(h, p["sa_v"]), heads)
    x = ag.add(x, ag.matmul(sa, p["sa_o"]))
    h = ag.layer_norm(x, p["ln2_g"], p["ln2_b"])
    ca, _ = attention(ag.matmul(h, p["ca_q"]), ag.matmul(memory, p["ca_k"]),
                      ag.matmul(memory, p["ca_v"]), heads)
    x = ag.add(x, ag.matmul(ca, p["ca_o"]))
    h = ag.layer_norm(x, p["ln3_g"], p["ln3_b"])
    ff = linear(ag.relu(linear(h, p["ff_w1"], p["ff_b1"])), p["ff_w2"], p["ff_b2"])
    return ag.add(x, ff)


def decode(f_v_prime: FeatureMap, queries: Tensor, params: DecoderParams,
           num_layers: int | None = None) -> Tensor:
    """Instance features (..., Q, C) from queries attending to the visual map.

    ``num_layers`` overrides the layer count (0 bypasses the decoder).
    """
    if not np.all(np.isfinite(queries.data)):
        raise ValueError("queries contain non-finite values")
    n = len(params.layers) if num_layers is None else num_layers
    x = queries
    for p in params.layers[:n]:
        x = decoder_layer(x, f_v_prime.data, p, params.heads)
    return x


def referring_score(f_ins: Tensor, f_r_prime: FeatureMap) -> Tensor:
    """Dot product of each instance feature with the pooled referring feature."""
    pooled = ag.mean_pool_rows(f_r_prime.data, f_r_prime.pad_mask)  # (..., C)
    col = ag.reshape(pooled, (*pooled.shape, 1))
    out = ag.matmul(f_ins, col)
    return ag.reshape(out, out.shape[:-1])


# ---------------------------------------------------------------------------
# box and mask heads

@dataclass
class HeadParams:
    box_w1: Tensor
    box_b1: Tensor
    box_w2: Tensor
    box_b2: Tensor
    gen_w: Tensor  # C x G, G = number of generated conv parameters
    gen_b: Tensor
    channels: int = 8
    upsample: dict = field(default_factory=dict, repr=False)

    @classmethod
    def init(cls, rng: np.random.Generator, C: int, channels: int = 8) -> "HeadParams":
        g = conv_param_count(C, channels)
        gen_b = np.zeros(g)
        # default conv stack weights live in the bias; the query modulates them
        for lo, hi, fan_in, fan_out in _weight_slices(C, channels):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            gen_b[lo:hi] = rng.uniform(-bound, bound, hi - lo)
        return cls(
            box_w1=_uniform(rng, C, C, "box_w1"), box_b1=ag.parameter(np.zeros(C)),
            box_w2=_uniform(rng, C, 4, "box_w2"), box_b2=ag.parameter(np.zeros(4)),
            gen_w=ag.parameter(rng.normal(0.0, 0.02, (C, g)), "gen_w"),
            gen_b=ag.parameter(gen_b, "gen_b"),
            channels=channels,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"box_w1": self.box_w1, "box_b1": self.box_b1, "box_w2": self.box_w2,
                "box_b2": self.box_b2, "gen_w": self.gen_w, "gen_b": self.gen_b}


def conv_param_count(C: int, channels: int = 8) -> int:
    return C * channels + channels + channels * channels + channels + channels + 1


def _layout(C: int, k: int):
    """Offsets of (w1, b1, w2, b2, w3, b3) inside the generated vector."""
    sizes = [C * k, k, k * k, k, k, 1]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    return [(int(offs[i]), int(offs[i + 1])) for i in range(6)]


def _weight_slices(C: int, k: int):
    lay = _layout(C, k)
    return [(lay[0][0], lay[0][1], C, k), (lay[2][0], lay[2][1], k, k), (lay[4][0], lay[4][1], k, 1)]


def box_head(f_ins: Tensor, params: HeadParams) -> Tensor:
    """Normalized (cx, cy, w, h) per instance, each in (0, 1)."""
    return ag.sigmoid(linear(ag.relu(linear(f_ins, params.box_w1, params.box_b1)),
                             params.box_w2, params.box_b2))


def generate_conv_params(f_ins: Tensor, params: HeadParams) -> Tensor:
    return linear(f_ins, params.gen_w, params.gen_b)


def apply_dynamic_convs(conv: Tensor, f_v: Tensor, C: int, k: int) -> Tensor:
    """Run the generated 1x1 conv stack C -> k -> k -> 1 on visual rows.

    conv: (B, Q, G) generated parameters; f_v: (B, L_v, C).
    Returns per-position logits (B, Q, L_v).
    """
    b, q = conv.shape[:2]
    lay = _layout(C, k)

    def piece(i, shape):
        lo, hi = lay[i]
        return ag.reshape(ag.getitem(conv, (Ellipsis, slice(lo, hi))), (b, q, *shape))

    x = ag.reshape(f_v, (b, 1, f_v.shape[-2], C))
    x = ag.relu(ag.add(ag.matmul(x, piece(0, (C, k))), piece(1, (1, k))))
    x = ag.relu(ag.add(ag.matmul(x, piece(2, (k, k))), piece(3, (1, k))))
    x = ag.add(ag.matmul(x, piece(4, (k, 1))), piece(5, (1, 1)))
    return ag.reshape(x, (b, q, f_v.shape[-2]))


def upsample_logits(grid_logits: Tensor, out_hw: tuple[int, int], cache: dict | None = None) -> Tensor:
    """Bilinear resize of (..., h', w') logits to (..., H, W)."""
    h, w = grid_logits.shape[-2:]
    key = (h, w, *out_hw)
    if cache is not None and key in cache:
        uh, uw = cache[key]
    else:
        uh, uw = bilinear_matrix(h, out_hw[0]), bilinear_matrix(w, out_hw[1]).T
        if cache is not None:
            cache[key] = (uh, uw)
    return ag.matmul(ag.matmul(Tensor(uh), grid_logits), Tensor(uw))


def dynamic_mask_head_batch(f_ins: Tensor, f_v_prime: FeatureMap, params: HeadParams,
                            out_hw: tuple[int, int]) -> Tensor:
    """Mask logits (B, Q, H, W) for every query of every batch item."""
    if f_v_prime.spatial_dims is None:
        raise ValueError("visual feature map lacks spatial_dims")
    gh, gw = f_v_prime.spatial_dims
    C = f_v_prime.width
    conv = generate_conv_params(f_ins, params)
    logits = apply_dynamic_convs(conv, f_v_prime.data, C, params.channels)
    b, q = logits.shape[:2]
    grid = ag.reshape(logits, (b, q, gh, gw))
    return upsample_logits(grid, out_hw, params.upsample)


def dynamic_mask_head(f_ins_row: Tensor, f_v_prime: FeatureMap, params: HeadParams,
                      out_hw: tuple[int, int]) -> Tensor:
    """Mask logits (H, W) for one instance feature (C,) over one visual map (L_v, C)."""
    if f_v_prime.spatial_dims is None:
        raise ValueError("visual feature map lacks spatial_dims")
    C = f_ins_row.shape[-1]
    row = ag.reshape(f_ins_row, (1, 1, C))
    fv = FeatureMap(ag.reshape(f_v_prime.data, (1, *f_v_prime.data.shape[-2:])), "visual",
                    f_v_prime.pad_mask.reshape(1, -1), f_v_prime.spatial_dims)
    out = dynamic_mask_head_batch(row, fv, params, out_hw)
    return ag.reshape(out, out_hw)


# ---------------------------------------------------------------------------
# predictions and NMS

@dataclass
class Prediction:
    query_id: int
    mask_logits: np.ndarray  # H x W
    box: np.ndarray  # (cx, cy, w, h)
    ref_score: float  # pre-sigmoid

    @property
    def score(self) -> float:
        return float(1.0 / (1.0 + math.exp(-self.ref_score)))


def box_cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    a, b = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_filter(predictions: list[Prediction], iou_threshold: float = 0.7,
               score_threshold: float = 0.0) -> list[Prediction]:
    """Greedy NMS on sigmoid(ref_score); ties go to the lower query id."""
    if not (0.0 <= iou_threshold <= 1.0 and 0.0 <= score_threshold <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    cands = [p for p in predictions if p.score > score_threshold]
    cands.sort(key=lambda p: (-p.score, p.query_id))
    kept: list[Prediction] = []
    for p in cands:
        if all(box_iou(p.box, k.box) < iou_threshold for k in kept):
            kept.append(p)
    return kept
