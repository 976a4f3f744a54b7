"""Binary checkpoint files.

Layout (all integers little-endian u32)::

    b"PVAE" | version | meta_len | meta (UTF-8 JSON, sorted keys)
    | count | count x (name_len | name | ndim | dims... | float32 LE data)

The JSON block carries the model config, the training config snapshot and
the generator state, so a file fully describes how to rebuild the model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ProtoVAE

MAGIC = b"PVAE"
VERSION = 1


@dataclass
class Checkpoint:
    model: ProtoVAE
    train_config: dict = field(default_factory=dict)
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _meta(model, train_config, rng_state, extra):
    return {
        "model_config": model.config.to_dict(),
        "train_config": dict(train_config or {}),
        "rng_state": rng_state,
        "extra": dict(extra or {}),
    }


def dumps(model: ProtoVAE, train_config=None, rng_state=None, extra=None) -> bytes:
    meta = json.dumps(
        _meta(model, train_config, rng_state, extra), sort_keys=True, separators=(",", ":")
    ).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, p in params.items():
        raw = name.encode()
        data = np.ascontiguousarray(p.data, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def save_checkpoint(model, path, train_config=None, rng_state=None, extra=None):
    """Write ``model`` (plus optional config snapshot and rng state) to ``path``."""
    Path(path).write_bytes(dumps(model, train_config, rng_state, extra))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.path, self.pos = raw, path, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", self.path, len(self.raw))
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def loads(raw: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(raw, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a ProtoVAE checkpoint (bad magic)", path, 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})", path, 4)
    meta_len = r.u32("metadata length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
        config = ModelConfig(**meta["model_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}", path, meta_at) from exc

    arrays = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode()
        ndim = r.u32("rank")
        shape = tuple(r.u32("dimension") for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * count, f"data of {name}"), dtype="<f4").reshape(shape)
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after last tensor", path, r.pos)

    model = ProtoVAE(config)
    model.load_arrays(arrays)
    return Checkpoint(model, meta.get("train_config", {}), meta.get("rng_state"), meta.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; raises :class:`FormatError` for corrupt files and
    :class:`ShapeError`/``KeyError`` when tensors do not fit the stored config."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return loads(path.read_bytes(), path)
