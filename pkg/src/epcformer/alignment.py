"""Expression alignment: projection MLP, contrastive loss, batch construction, query injection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import NUM_CLASSES, VideoSample, mentioned_attributes
from .encoders import EncoderParams, FeatureMap, encode_audio, encode_text


class AlignmentBatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlignmentConfig:
    temperature: float = 0.07
    mlp_hidden: int = 32
    mlp_layers: int = 2
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.mlp_layers < 1:
            raise ValueError("mlp_layers must be >= 1")


@dataclass
class ProjectionParams:
    """Linear layers of the projection MLP, ReLU between consecutive layers."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, hidden: int, layers: int = 2,
             bias_init: float = 0.01) -> "ProjectionParams":
        dims = [width] + [hidden] * (layers - 1) + [width]
        ws, bs = [], []
        for i in range(layers):
            bound = np.sqrt(6.0 / (dims[i] + dims[i + 1]))
            ws.append(ag.parameter(rng.uniform(-bound, bound, (dims[i], dims[i + 1])), f"mlp.w{i}"))
            # nonzero bias keeps embeddings away from the zero vector at step 0
            bs.append(ag.parameter(np.full(dims[i + 1], bias_init), f"mlp.b{i}"))
        return cls(ws, bs)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


@dataclass
class ExpressionEmbedding:
    vector: Tensor
    modality: str
    object_id: int = -1
    semantic_id: int = -1


def mlp(x: Tensor, params: ProjectionParams) -> Tensor:
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = ag.add(ag.matmul(x, w), b)
        if i < n - 1:
            x = ag.relu(x)
    return x


def project_pooled(pooled: Tensor, params: ProjectionParams) -> Tensor:
    """MLP over already pooled (..., C) vectors; accepts 1-D input."""
    if pooled.ndim == 1:
        return ag.reshape(mlp(ag.reshape(pooled, (1, -1)), params), (-1,))
    return mlp(pooled, params)


def project_expression(f: FeatureMap, params: ProjectionParams) -> Tensor:
    """Mean-pool the unpadded rows, then apply the projection MLP.

    Works on a single map (L x C -> C) or a batch (B x L x C -> B x C).
    """
    if f.role not in ("text", "audio"):
        raise ValueError(f"project_expression expects text or audio features, got {f.role}")
    if np.any(f.pad_mask.all(axis=-1)):
        raise ValueError("cannot project a fully padded expression")
    pooled = ag.mean_pool_rows(f.data, f.pad_mask)
    return project_pooled(pooled, params)


def embed(f: FeatureMap, params: ProjectionParams, object_id: int = -1,
          semantic_id: int = -1) -> ExpressionEmbedding:
    return ExpressionEmbedding(project_expression(f, params), f.role, object_id, semantic_id)


def expression_contrastive_loss(e_audio: Tensor, e_text: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over cosine similarities; row ``i`` of each is a positive pair.

    Written as the negative log-likelihood so minimizing pulls pairs together.
    """
    if e_audio.shape != e_text.shape or e_audio.ndim != 2:
        raise ag.ShapeError(f"expected two N x C arrays, got {e_audio.shape} and {e_text.shape}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = e_audio.shape[0]
    sim = ag.scale(ag.cosine_matrix(e_audio, e_text), 1.0 / tau)  # sim[i, j] = Sim(a_i, t_j)
    diag = (np.arange(n), np.arange(n))
    a2t = ag.getitem(ag.log_softmax(sim, axis=1), diag)
    t2a = ag.getitem(ag.log_softmax(sim, axis=0), diag)
    return ag.scale(ag.add(ag.sum_(a2t), ag.sum_(t2a)), -1.0 / (2 * n))


# ---------------------------------------------------------------------------
# batch construction

@dataclass
class AlignmentEntry:
    audio_tokens: tuple[int, ...]
    text_tokens: tuple[int, ...]
    object_id: int
    semantic_id: int
    video_id: int
    attributes: tuple[str, str, str] = ("", "", "")


@dataclass
class AlignmentBatch:
    entries: list[AlignmentEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def encode(self, params: EncoderParams) -> tuple[FeatureMap, FeatureMap]:
        audio = encode_audio([e.audio_tokens for e in self.entries], params)
        text = encode_text([e.text_tokens for e in self.entries], params)
        return audio, text


def _object_pair(sample: VideoSample, oid: int, rng: np.random.Generator):
    """Two (text, audio) pairs of one object drawn from distinct paraphrase classes."""
    by_sem: dict[int, tuple[list, list]] = {}
    for e in sample.expressions:
        if e.object_id != oid:
            continue
        slot = by_sem.setdefault(e.semantic_id, ([], []))
        slot[0 if e.modality == "text" else 1].append(e)
    usable = sorted(s for s, (t, a) in by_sem.items() if t and a)
    if len(usable) < 2:
        return None
    s1, s2 = rng.choice(usable, size=2, replace=False)
    pairs = []
    for s in (int(s1), int(s2)):
        texts, audios = by_sem[s]
        t = texts[int(rng.integers(len(texts)))]
        a = audios[int(rng.integers(len(audios)))]
        pairs.append((t, a, s))
    return pairs


def build_alignment_batch(dataset: list[VideoSample], batch_size: int, rng: np.random.Generator,
                          max_retries: int = 100) -> AlignmentBatch:
    """Paired audio/text entries: each sampled object contributes two semantic variants.

    Groups come from distinct videos where possible and never repeat an
    attribute tuple. No two entries say the same thing about their objects
    (identical content would make the pairing target ambiguous), so the
    only hard negatives for an entry are the other paraphrase of its own
    object.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError("batch_size must be a positive even number")
    if not dataset:
        raise AlignmentBatchError("empty dataset")
    groups = batch_size // 2
    batch = AlignmentBatch()
    used_videos: set[int] = set()
    used_objects: set[tuple[int, int]] = set()
    used_attrs: set[tuple] = set()
    used_content: set[tuple] = set()
    retries = 0
    while len(batch) < batch_size:
        fresh = [v for v in range(len(dataset)) if v not in used_videos]
        pool = fresh if fresh else list(range(len(dataset)))
        vid = pool[int(rng.integers(len(pool)))]
        sample = dataset[vid]
        oid = int(rng.integers(len(sample.scene.objects)))
        attrs = sample.scene.objects[oid].attributes
        pairs = None
        if (vid, oid) not in used_objects and attrs not in used_attrs:
            pairs = _object_pair(sample, oid, rng)
        if pairs is not None:
            content = {mentioned_attributes(sample.scene.objects[oid], s % NUM_CLASSES) for _, _, s in pairs}
            if content & used_content:
                pairs = None
        if pairs is None:
            retries += 1
            if retries > max_retries:
                raise AlignmentBatchError(
                    f"could not fill {groups} object groups after {max_retries} retries")
            continue
        used_videos.add(vid)
        used_objects.add((vid, oid))
        used_attrs.add(attrs)
        used_content |= content
        for t, a, s in pairs:
            batch.entries.append(AlignmentEntry(a.tokens, t.tokens, oid, s, vid, attrs))
    return batch


# ---------------------------------------------------------------------------
# expression as query

def inject_queries(queries: Tensor, e_text: Tensor | None = None, e_audio: Tensor | None = None,
                   enabled: bool = True) -> Tensor:
    """Add the mean of the available expression embeddings to every query row."""
    present = [e for e in (e_text, e_audio) if e is not None]
    if not enabled or not present:
        return queries
    if len(present) == 1:
        mean = present[0]
    else:
        mean = ag.scale(ag.add(present[0], present[1]), 0.5)
    # (..., C) -> (..., 1, C) so it broadcasts over the query axis
    return ag.add(queries, ag.reshape(mean, (*mean.shape[:-1], 1, mean.shape[-1])))


def inject_queries_weighted(queries: Tensor, e_text: Tensor, e_audio: Tensor,
                            has_text: np.ndarray, has_audio: np.ndarray,
                            enabled: bool = True) -> Tensor:
    """Batched injection where each row may lack either modality.

    ``e_text``/``e_audio`` are (B, C); rows whose modality is missing get
    weight zero, so the injected vector is exactly the mean of what exists.
    """
    if not enabled:
        return queries
    ht = np.asarray(has_text, dtype=np.float64)
    ha = np.asarray(has_audio, dtype=np.float64)
    count = ht + ha
    wt = np.divide(ht, count, out=np.zeros_like(ht), where=count > 0)[:, None]
    wa = np.divide(ha, count, out=np.zeros_like(ha), where=count > 0)[:, None]
    mean = ag.add(ag.mul(e_text, wt), ag.mul(e_audio, wa))
    return ag.add(queries, ag.reshape(mean, (mean.shape[0], 1, mean.shape[1])))
