"""Binary checkpoints of a model's configuration and parameters.

Layout (little endian)::

    b"MUSE" | u32 version | u32 n | n bytes of canonical config JSON
    | u32 record count | records

    record: u32 name length | name (utf-8) | u32 rank | rank x u32 dims
            | float64 payload in C order

Records are written in sorted name order so equal models give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .seqmodel import ErrorModel, ModelConfig, init_params

MAGIC = b"MUSE"
VERSION = 1


def save(model: ErrorModel, path) -> None:
    cfg = model.config.to_json().encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        key = name.encode()
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load(path) -> ErrorModel:
    """Read a checkpoint, checking every tensor against the stored config."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode()))
    expected = init_params(config)
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name not in expected:
            raise ShapeError(f"{path}: unexpected tensor {name!r}")
        if arr.shape != expected[name].shape:
            raise ShapeError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {expected[name].shape}")
        params[name] = arr
    missing = set(expected) - set(params)
    if missing:
        raise ShapeError(f"{path}: missing tensors {sorted(missing)[:5]}")
    if r.pos != len(r.data):
        raise DataError(f"{path}: trailing bytes after the last record")
    for name, t in expected.items():
        t.data = params[name]
    return ErrorModel(config, params=expected)
