"""Binary "GEOC" checkpoints.

Layout, all little-endian::

    b"GEOC" | u32 version | u32 n | n bytes of JSON {config, target_norm, provenance}
    u32 tensor count
    per tensor: u32 name length | name (utf-8) | u32 rank | u64 extents[rank] | f32 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, CorruptCheckpoint, UnsupportedVersion
from .model import ArchConfig, Model, param_shapes

MAGIC = b"GEOC"
VERSION = 1


def checkpoint_bytes(model: Model) -> bytes:
    meta = {
        "config": model.config.to_dict(),
        "target_norm": model.target_norm,
        "provenance": model.provenance,
    }
    block = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(block)), block,
             struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpoint("checkpoint is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(blob: bytes) -> Model:
    r = _Reader(blob)
    if len(blob) < 4:
        raise CorruptCheckpoint("checkpoint is truncated")
    if r.take(4) != MAGIC:
        raise BadMagic("not a GEOC checkpoint")
    version, n = r.unpack("<II")
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.take(n))
        config = ArchConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"bad config block: {exc}") from exc
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        params[name] = data
    if r.pos != len(blob):
        raise CorruptCheckpoint("trailing bytes after last tensor")
    expected = param_shapes(config)
    if list(expected) != list(params) or any(params[k].shape != expected[k] for k in expected):
        raise CorruptCheckpoint("tensors do not match the stored config")
    return Model(config, params, meta.get("target_norm"), meta.get("provenance") or {})


def load_checkpoint(path) -> Model:
    return checkpoint_from_bytes(Path(path).read_bytes())
