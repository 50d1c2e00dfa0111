"""Synthetic referring videos: moving colored shapes with text and audio expressions."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
MOTIONS = ("left", "right", "up", "down", "still")

RGB = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 210, 40),
}
BACKGROUND = (16, 16, 16)
VELOCITY = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0), "still": (0, 0)}

SHAPE_WORDS = {"square": ("square", "box"), "circle": ("circle", "ball"),
               "triangle": ("triangle", "wedge")}
THING_WORDS = ("thing", "object")
MOVE_WORDS = ("moving", "going")
STILL_PHRASES = (("staying", "still"), ("not", "moving"))

# paraphrase classes: which attributes the expression names
CLASS_COLOR_SHAPE, CLASS_COLOR_MOTION, CLASS_FULL = 0, 1, 2
NUM_CLASSES = 3

TEXT_VOCAB = (
    "the", "that", "is", "thing", "object",
    "red", "green", "blue", "yellow",
    "square", "box", "circle", "ball", "triangle", "wedge",
    "moving", "going", "staying", "still", "not",
    "left", "right", "up", "down",
)
TEXT_INDEX = {w: i for i, w in enumerate(TEXT_VOCAB)}

# ARPAbet-style pronunciations
PRONUNCIATION = {
    "the": ("DH", "AH"), "that": ("DH", "AE", "T"), "is": ("IH", "Z"),
    "thing": ("TH", "IH", "NG"), "object": ("AA", "B", "JH", "EH", "K", "T"),
    "red": ("R", "EH", "D"), "green": ("G", "R", "IY", "N"), "blue": ("B", "L", "UW"),
    "yellow": ("Y", "EH", "L", "OW"),
    "square": ("S", "K", "W", "EH", "R"), "box": ("B", "AA", "K", "S"),
    "circle": ("S", "ER", "K", "AH", "L"), "ball": ("B", "AO", "L"),
    "triangle": ("T", "R", "AY", "AE", "NG", "G", "AH", "L"), "wedge": ("W", "EH", "JH"),
    "moving": ("M", "UW", "V", "IH", "NG"), "going": ("G", "OW", "IH", "NG"),
    "staying": ("S", "T", "EY", "IH", "NG"), "still": ("S", "T", "IH", "L"),
    "not": ("N", "AA", "T"),
    "left": ("L", "EH", "F", "T"), "right": ("R", "AY", "T"), "up": ("AH", "P"),
    "down": ("D", "AW", "N"),
}
FILLERS = ("<uh>", "<um>")
PHONEMES = tuple(sorted({p for seq in PRONUNCIATION.values() for p in seq})) + FILLERS
PHONEME_INDEX = {p: i for i, p in enumerate(PHONEMES)}
FILLER_IDS = frozenset(PHONEME_INDEX[f] for f in FILLERS)

FORMAT_MAGIC = b"EPCD"
FORMAT_VERSION = 1


class DatasetError(Exception):
    code = 5


class DatasetVersionError(DatasetError):
    code = 4


class DatasetTruncatedError(DatasetError):
    code = 5


class DatasetChecksumError(DatasetError):
    code = 6


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    motion: str
    start: tuple[int, int]  # top-left (row, col) in frame 0
    size: int

    @property
    def attributes(self) -> tuple[str, str, str]:
        return (self.shape, self.color, self.motion)


@dataclass(frozen=True)
class SceneSpec:
    frame_size: tuple[int, int]
    num_frames: int
    objects: tuple[ObjectSpec, ...]
    seed: int


@dataclass(frozen=True)
class ExpressionRecord:
    object_id: int
    modality: str  # "text" | "audio"
    variant_id: int
    tokens: tuple[int, ...]
    semantic_id: int

    @property
    def paraphrase_class(self) -> int:
        return self.semantic_id % NUM_CLASSES


@dataclass
class VideoSample:
    scene: SceneSpec
    frames: np.ndarray  # T x H x W x 3 uint8
    gt_masks: np.ndarray  # N_O x T x H x W bool
    gt_boxes: np.ndarray  # N_O x T x 4 normalized (cx, cy, w, h)
    expressions: list[ExpressionRecord] = field(default_factory=list)

    def expressions_for(self, object_id: int, modality: str) -> list[ExpressionRecord]:
        return [e for e in self.expressions if e.object_id == object_id and e.modality == modality]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (self.scene == other.scene and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.gt_masks, other.gt_masks)
                and np.array_equal(self.gt_boxes, other.gt_boxes)
                and self.expressions == other.expressions)


@dataclass(frozen=True)
class DataConfig:
    num_samples: int = 200
    height: int = 24
    width: int = 24
    num_frames: int = 4
    num_objects: int = 3
    min_size: int = 6
    max_size: int = 9
    text_variants: int = 2  # per paraphrase class
    audio_variants: int = 2
    max_fillers: int = 2


# ---------------------------------------------------------------------------
# rendering

def shape_mask(shape: str, size: int) -> np.ndarray:
    """Binary ``size x size`` stencil for a shape."""
    r, c = np.mgrid[0:size, 0:size]
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        center = (size - 1) / 2.0
        return (r - center) ** 2 + (c - center) ** 2 <= (size / 2.0) ** 2
    if shape == "triangle":
        # apex at the top row, base on the bottom row
        half = (r + 1) * (size / 2.0) / size
        center = (size - 1) / 2.0
        return np.abs(c - center) <= half
    raise ValueError(f"unknown shape {shape!r}")


def object_position(obj: ObjectSpec, t: int) -> tuple[int, int]:
    dr, dc = VELOCITY[obj.motion]
    return obj.start[0] + dr * t, obj.start[1] + dc * t


def object_masks(obj: ObjectSpec, frame_size: tuple[int, int], num_frames: int) -> np.ndarray:
    h, w = frame_size
    stencil = shape_mask(obj.shape, obj.size)
    out = np.zeros((num_frames, h, w), dtype=bool)
    for t in range(num_frames):
        r, c = object_position(obj, t)
        out[t, r:r + obj.size, c:c + obj.size] = stencil
    return out


def mask_to_box(mask: np.ndarray) -> np.ndarray:
    """Tight normalized (cx, cy, w, h) box around a nonempty binary mask."""
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no box")
    y0, y1 = rows[0], rows[-1] + 1
    x0, x1 = cols[0], cols[-1] + 1
    return np.array([(x0 + x1) / (2.0 * w), (y0 + y1) / (2.0 * h), (x1 - x0) / w, (y1 - y0) / h])


def render(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w = scene.frame_size
    t_count = scene.num_frames
    frames = np.empty((t_count, h, w, 3), dtype=np.uint8)
    frames[:] = BACKGROUND
    masks = np.stack([object_masks(o, scene.frame_size, t_count) for o in scene.objects])
    for o, m in zip(scene.objects, masks):
        frames[m] = RGB[o.color]
    boxes = np.array([[mask_to_box(m[t]) for t in range(t_count)] for m in masks])
    return frames, masks, boxes


# ---------------------------------------------------------------------------
# expressions

def expression_words(obj: ObjectSpec, cls: int, variant: int) -> list[str]:
    """Words of one paraphrase of ``obj``; ``variant`` picks synonyms."""
    shape_word = SHAPE_WORDS[obj.shape][variant % 2]
    if obj.motion == "still":
        motion = list(STILL_PHRASES[variant % 2])
    else:
        motion = [MOVE_WORDS[variant % 2], obj.motion]
    if cls == CLASS_COLOR_SHAPE:
        return ["the", obj.color, shape_word]
    if cls == CLASS_COLOR_MOTION:
        return ["the", obj.color, THING_WORDS[variant % 2], *motion]
    if cls == CLASS_FULL:
        return ["the", obj.color, shape_word, *motion]
    raise ValueError(f"unknown paraphrase class {cls}")


def mentioned_attributes(obj: ObjectSpec, cls: int) -> tuple[str, ...]:
    """What a paraphrase of class ``cls`` says about ``obj``, independent of wording."""
    if cls == CLASS_COLOR_SHAPE:
        return (obj.color, obj.shape)
    if cls == CLASS_COLOR_MOTION:
        return (obj.color, obj.motion)
    if cls == CLASS_FULL:
        return (obj.color, obj.shape, obj.motion)
    raise ValueError(f"unknown paraphrase class {cls}")


def text_tokens(words: list[str]) -> tuple[int, ...]:
    try:
        return tuple(TEXT_INDEX[w] for w in words)
    except KeyError as exc:
        raise ValueError(f"word {exc.args[0]!r} not in text vocabulary") from None


def words_of(tokens) -> list[str]:
    return [TEXT_VOCAB[t] for t in tokens]


def derive_audio_tokens(text_tokens_: tuple[int, ...] | list[int], variant_seed: int | None,
                        max_fillers: int = 2) -> tuple[int, ...]:
    """Pronounce text tokens as phonemes, inserting 0..max_fillers fillers after each word.

    ``variant_seed=None`` inserts no fillers.
    """
    rng = np.random.default_rng(variant_seed) if variant_seed is not None else None
    out: list[int] = []
    for tok in text_tokens_:
        if not 0 <= tok < len(TEXT_VOCAB):
            raise ValueError(f"unknown word id {tok}")
        word = TEXT_VOCAB[tok]
        if word not in PRONUNCIATION:
            raise ValueError(f"word {word!r} has no pronunciation")
        out.extend(PHONEME_INDEX[p] for p in PRONUNCIATION[word])
        if rng is not None:
            for _ in range(int(rng.integers(0, max_fillers + 1))):
                out.append(PHONEME_INDEX[FILLERS[int(rng.integers(0, len(FILLERS)))]])
    return tuple(out)


def strip_fillers(audio: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(t for t in audio if t not in FILLER_IDS)


def make_expressions(objects: tuple[ObjectSpec, ...], config: DataConfig,
                     rng: np.random.Generator) -> list[ExpressionRecord]:
    records = []
    for oid, obj in enumerate(objects):
        for cls in range(NUM_CLASSES):
            semantic_id = oid * NUM_CLASSES + cls
            for v in range(config.text_variants):
                toks = text_tokens(expression_words(obj, cls, v))
                records.append(ExpressionRecord(oid, "text", v, toks, semantic_id))
            for k in range(config.audio_variants):
                # audio variant k speaks synonym choice k with its own fillers
                toks = text_tokens(expression_words(obj, cls, k))
                seed = int(rng.integers(0, 2**63))
                audio = derive_audio_tokens(toks, seed, config.max_fillers)
                records.append(ExpressionRecord(oid, "audio", k, audio, semantic_id))
    return records


def describes(words: list[str], obj: ObjectSpec) -> bool:
    """Re-parse a templated expression and test whether it fits ``obj``."""
    inv_shape = {w: s for s, ws in SHAPE_WORDS.items() for w in ws}
    if obj.color not in words:
        return False
    named_shape = [inv_shape[w] for w in words if w in inv_shape]
    if named_shape and named_shape[0] != obj.shape:
        return False
    if "still" in words or ("not" in words and "moving" in words):
        return obj.motion == "still"
    named_dir = [w for w in words if w in VELOCITY and w != "still"]
    if named_dir and named_dir[0] != obj.motion:
        return False
    return True


# ---------------------------------------------------------------------------
# scenes

class _BalancedPool:
    """Draws attribute values keeping global counts as even as possible."""

    def __init__(self, values, rng):
        self.values = list(values)
        self.counts = {v: 0 for v in self.values}
        self.rng = rng

    def draw(self, exclude=()):
        choices = [v for v in self.values if v not in exclude]
        low = min(self.counts[v] for v in choices)
        tied = [v for v in choices if self.counts[v] == low]
        v = tied[int(self.rng.integers(0, len(tied)))]
        self.counts[v] += 1
        return v


def _place(specs, config, rng, tries=200):
    h, w = config.height, config.width
    t_count = config.num_frames
    occupied = np.zeros((t_count, h, w), dtype=bool)
    placed = []
    for shape, color, motion in specs:
        for _ in range(tries):
            size = int(rng.integers(config.min_size, config.max_size + 1))
            dr, dc = VELOCITY[motion]
            # keep a 1-pixel margin for every frame
            rows = [1 - min(0, dr * (t_count - 1)), h - 1 - size - max(0, dr * (t_count - 1))]
            cols = [1 - min(0, dc * (t_count - 1)), w - 1 - size - max(0, dc * (t_count - 1))]
            if rows[1] < rows[0] or cols[1] < cols[0]:
                continue
            start = (int(rng.integers(rows[0], rows[1] + 1)), int(rng.integers(cols[0], cols[1] + 1)))
            obj = ObjectSpec(shape, color, motion, start, size)
            m = object_masks(obj, (h, w), t_count)
            # one background pixel of separation between objects
            grown = m.copy()
            grown[:, 1:] |= m[:, :-1]
            grown[:, :-1] |= m[:, 1:]
            grown[:, :, 1:] |= m[:, :, :-1]
            grown[:, :, :-1] |= m[:, :, 1:]
            if not (grown & occupied).any():
                occupied |= m
                placed.append(obj)
                break
        else:
            return None
    return tuple(placed)


def generate_scene(config: DataConfig, seed: int, pools=None) -> VideoSample:
    rng = np.random.default_rng(seed)
    if pools is None:
        pools = {k: _BalancedPool(v, rng) for k, v in
                 (("shape", SHAPES), ("color", COLORS), ("motion", MOTIONS))}
    specs = []
    used_colors: list[str] = []
    for _ in range(config.num_objects):
        color = pools["color"].draw(exclude=used_colors)
        used_colors.append(color)
        specs.append((pools["shape"].draw(), color, pools["motion"].draw()))
    for _ in range(50):
        objects = _place(specs, config, rng)
        if objects is not None:
            break
    else:
        raise RuntimeError(f"could not place {len(specs)} objects in a "
                           f"{config.height}x{config.width} frame")
    scene = SceneSpec((config.height, config.width), config.num_frames, objects, seed)
    frames, masks, boxes = render(scene)
    return VideoSample(scene, frames, masks, boxes, make_expressions(objects, config, rng))


def generate_dataset(config: DataConfig, seed: int) -> list[VideoSample]:
    """Deterministic list of ``config.num_samples`` scenes.

    Colors are distinct within a scene, so every expression (all of which
    name the color) refers to exactly one object.
    """
    if config.num_objects < 1 or config.num_objects > 4:
        raise ValueError("num_objects must be within 1..4")
    if config.num_objects > len(COLORS):
        raise ValueError(f"{config.num_objects} objects exceed the {len(COLORS)} distinct colors")
    if min(config.height, config.width, config.num_frames, config.min_size) <= 0:
        raise ValueError("config dimensions must be positive")
    if config.text_variants < 2 or config.audio_variants < 2:
        raise ValueError("at least two text and two audio variants per object are required")
    master = np.random.default_rng(seed)
    pools = {k: _BalancedPool(v, master) for k, v in
             (("shape", SHAPES), ("color", COLORS), ("motion", MOTIONS))}
    seeds = master.integers(0, 2**63, size=config.num_samples)
    return [generate_scene(config, int(s), pools) for s in seeds]


def attribute_space_size() -> int:
    return len(list(product(SHAPES, COLORS, MOTIONS)))


# ---------------------------------------------------------------------------
# file format
#
#   magic "EPCD" | version u32 | count u32 | sha256(payload) 32 bytes | payload
#   payload = manifest_len u64 | manifest (UTF-8 JSON) | blob
#
# The manifest lists, per sample, the scene spec, expression records and the
# byte offsets (relative to the blob start) of the raw frames and of the
# run-length-encoded masks.  All integers are little-endian.

def rle_encode(mask: np.ndarray) -> np.ndarray:
    """Run lengths of a flattened binary mask, starting with a run of zeros."""
    flat = np.asarray(mask, dtype=bool).reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat.size and flat[0] == 1:
        runs = np.concatenate([[0], runs])
    return runs.astype("<u4")


def rle_decode(runs: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    vals = np.arange(len(runs)) % 2
    flat = np.repeat(vals, runs).astype(bool)
    if flat.size != int(np.prod(shape)):
        raise DatasetTruncatedError("mask run lengths do not cover the mask")
    return flat.reshape(shape)


def _encode(dataset: list[VideoSample]) -> tuple[bytes, int]:
    blob = io.BytesIO()
    entries = []
    for s in dataset:
        frame_off = blob.tell()
        blob.write(np.ascontiguousarray(s.frames, dtype=np.uint8).tobytes())
        mask_entries = []
        for m in s.gt_masks:
            runs = rle_encode(m)
            mask_entries.append([blob.tell(), int(runs.size)])
            blob.write(runs.tobytes())
        sc = s.scene
        entries.append({
            "scene": {
                "frame_size": list(sc.frame_size),
                "num_frames": sc.num_frames,
                "seed": sc.seed,
                "objects": [{"shape": o.shape, "color": o.color, "motion": o.motion,
                             "start": list(o.start), "size": o.size} for o in sc.objects],
            },
            "frames_offset": frame_off,
            "frames_shape": list(s.frames.shape),
            "masks": mask_entries,
            "boxes": s.gt_boxes.tolist(),
            "expressions": [{"object_id": e.object_id, "modality": e.modality,
                             "variant_id": e.variant_id, "tokens": list(e.tokens),
                             "semantic_id": e.semantic_id} for e in s.expressions],
        })
    manifest = json.dumps({"text_vocab": TEXT_VOCAB, "phonemes": PHONEMES, "samples": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = struct.pack("<Q", len(manifest)) + manifest + blob.getvalue()
    return payload, len(dataset)


def save_dataset(path, dataset: list[VideoSample]) -> None:
    payload, count = _encode(dataset)
    header = FORMAT_MAGIC + struct.pack("<II", FORMAT_VERSION, count) + hashlib.sha256(payload).digest()
    Path(path).write_bytes(header + payload)


def load_dataset(path) -> list[VideoSample]:
    raw = Path(path).read_bytes()
    if len(raw) < 44:
        raise DatasetTruncatedError(f"{path}: file too short for a header")
    if raw[:4] != FORMAT_MAGIC:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    digest, payload = raw[12:44], raw[44:]
    if len(payload) < 8:
        raise DatasetTruncatedError(f"{path}: payload truncated")
    (mlen,) = struct.unpack_from("<Q", payload, 0)
    if len(payload) < 8 + mlen:
        raise DatasetTruncatedError(f"{path}: manifest truncated")
    if hashlib.sha256(payload).digest() != digest:
        raise DatasetChecksumError(f"{path}: payload checksum mismatch")
    manifest = json.loads(payload[8:8 + mlen].decode("utf-8"))
    blob = memoryview(payload)[8 + mlen:]
    samples = []
    for e in manifest["samples"]:
        sc = e["scene"]
        objects = tuple(ObjectSpec(o["shape"], o["color"], o["motion"], tuple(o["start"]), o["size"])
                        for o in sc["objects"])
        scene = SceneSpec(tuple(sc["frame_size"]), sc["num_frames"], objects, sc["seed"])
        shape = tuple(e["frames_shape"])
        n = int(np.prod(shape))
        off = e["frames_offset"]
        if off + n > len(blob):
            raise DatasetTruncatedError(f"{path}: frame blob truncated")
        frames = np.frombuffer(blob[off:off + n], dtype=np.uint8).reshape(shape).copy()
        masks = []
        for moff, mlen_runs in e["masks"]:
            end = moff + 4 * mlen_runs
            if end > len(blob):
                raise DatasetTruncatedError(f"{path}: mask blob truncated")
            runs = np.frombuffer(blob[moff:end], dtype="<u4")
            masks.append(rle_decode(runs, shape[:3]))
        exprs = [ExpressionRecord(x["object_id"], x["modality"], x["variant_id"],
                                  tuple(x["tokens"]), x["semantic_id"]) for x in e["expressions"]]
        samples.append(VideoSample(scene, frames,
                                   np.stack(masks) if masks else np.zeros((0,) + shape[:3], bool),
                                   np.array(e["boxes"], dtype=np.float64).reshape(len(objects), shape[0], 4),
                                   exprs))
    if len(samples) != count:
        raise DatasetTruncatedError(f"{path}: header says {count} samples, manifest has {len(samples)}")
    return samples
