"""Binary checkpoints: config snapshot plus named float64 parameter tensors.

Layout (little-endian)::

    b"EPCK" | u32 version | 32-byte sha256(payload) | payload
    payload = u32 len | config text | u32 count | records
    record  = u16 len | name | u8 ndim | u32 dims... | float64 data
"""

from __future__ import annotations

import hashlib
import io
import os
import struct

import numpy as np

from .config import Config
from .model import EPCFormer

MAGIC = b"EPCK"
VERSION = 1
_HEADER = struct.Struct("<4sI32s")


class CheckpointError(Exception):
    code = 5


class CheckpointVersionError(CheckpointError):
    code = 4


class CheckpointChecksumError(CheckpointError):
    code = 6


def to_bytes(model: EPCFormer) -> bytes:
    buf = io.BytesIO()
    cfg = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    payload = buf.getvalue()
    return _HEADER.pack(MAGIC, VERSION, hashlib.sha256(payload).digest()) + payload


def save_checkpoint(path: str | os.PathLike, model: EPCFormer) -> None:
    blob = to_bytes(model)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _take(view: memoryview, pos: int, n: int) -> tuple[memoryview, int]:
    if pos + n > len(view):
        raise CheckpointError("truncated checkpoint payload")
    return view[pos:pos + n], pos + n


def from_bytes(blob: bytes) -> EPCFormer:
    if len(blob) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, digest = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    payload = memoryview(blob)[_HEADER.size:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointChecksumError("checkpoint checksum mismatch")

    chunk, pos = _take(payload, 0, 4)
    (n,) = struct.unpack("<I", chunk)
    chunk, pos = _take(payload, pos, n)
    config = Config.from_text(bytes(chunk).decode("utf-8"))
    chunk, pos = _take(payload, pos, 4)
    (count,) = struct.unpack("<I", chunk)
    tensors = {}
    for _ in range(count):
        chunk, pos = _take(payload, pos, 2)
        (n,) = struct.unpack("<H", chunk)
        chunk, pos = _take(payload, pos, n)
        name = bytes(chunk).decode("utf-8")
        chunk, pos = _take(payload, pos, 1)
        (ndim,) = struct.unpack("<B", chunk)
        chunk, pos = _take(payload, pos, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", chunk)
        chunk, pos = _take(payload, pos, 8 * int(np.prod(shape, dtype=np.int64)))
        tensors[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(payload):
        raise CheckpointError("trailing bytes after checkpoint records")

    model = EPCFormer(config)
    params = model.parameters()
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise CheckpointError(f"parameter names differ from the model: {missing[:3]}")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise CheckpointError(f"shape of {name} is {tensors[name].shape}, model has {p.data.shape}")
        p.data[...] = tensors[name]
    return model


def load_checkpoint(path: str | os.PathLike) -> EPCFormer:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
