"""Flat ``key=value`` configuration shared by generation, training and evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import DataConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # data
    num_samples: int = 200
    heldout: int = 40
    height: int = 24
    width: int = 24
    frames: int = 4
    objects: int = 3
    min_size: int = 6
    max_size: int = 9
    # architecture
    C: int = 32
    L: int = 16
    P: int = 4
    heads: int = 4
    queries: int = 8
    decoder_layers: int = 2
    ffn: int = 64
    mlp_hidden: int = 32
    mlp_layers: int = 2
    mask_channels: int = 8
    audio_pool_stride: int = 3
    eq: bool = True
    # losses
    tau: float = 0.07
    emb_tau: float = 0.07
    lambda_ref: float = 2.0
    lambda_box: float = 1.0
    lambda_mask: float = 1.0
    lambda_emb: float = 1.0
    lambda_expr: float = 1.0
    box_l1: float = 5.0
    box_giou: float = 2.0
    mask_dice: float = 5.0
    mask_focal: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # optimization
    lr: float = 2e-3
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    steps: int = 10_000
    batch_size: int = 4
    align_batch: int = 16
    train_frames: int = 2
    seed: int = 0
    # inference
    nms_iou: float = 0.7
    score_threshold: float = 0.5

    def __post_init__(self):
        if self.C % self.heads:
            raise ConfigError(f"C={self.C} is not divisible by heads={self.heads}")
        if self.height % self.P or self.width % self.P:
            raise ConfigError(f"frame {self.height}x{self.width} not divisible by patch {self.P}")
        if self.tau <= 0 or self.emb_tau <= 0:
            raise ConfigError("temperatures must be positive")
        if self.mlp_layers < 1 or self.decoder_layers < 0:
            raise ConfigError("mlp_layers must be >= 1 and decoder_layers >= 0")
        if self.queries < self.objects:
            raise ConfigError("need at least as many queries as objects per scene")
        if self.lr < 0 or self.steps < 0:
            raise ConfigError("lr and steps must be non-negative")
        if self.heldout >= self.num_samples:
            raise ConfigError("heldout split must leave training samples")

    @property
    def data(self) -> DataConfig:
        return DataConfig(num_samples=self.num_samples, height=self.height, width=self.width,
                          num_frames=self.frames, num_objects=self.objects,
                          min_size=self.min_size, max_size=self.max_size)

    def updated(self, **kw) -> "Config":
        return replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                v = int(v)
            lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Config":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kind = types[key]
            try:
                if kind in ("bool", bool):
                    values[key] = val.lower() in ("1", "true", "yes", "on")
                elif kind in ("int", int):
                    values[key] = int(val)
                else:
                    values[key] = float(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value {val!r} for {key}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_text(Path(path).read_text())
