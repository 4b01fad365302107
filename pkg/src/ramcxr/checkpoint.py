"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RAMCKPT1"                      8 bytes magic
    u32 version                      currently 1
    u64 seed, u64 epoch
    u32 n, then n bytes              run configuration text (UTF-8)
    u32 count                        number of tensors, then per tensor:
        u16 n, n bytes               name (UTF-8)
        u8 ndim, ndim * u32          shape
        prod(shape) * f64            payload, row-major, little-endian

Float payloads are written with dtype ``<f8`` so a load reproduces every
parameter bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RAMCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0
    version: int = VERSION


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<IQQ", ckpt.version, ckpt.seed, ckpt.epoch)]
    text = ckpt.config_text.encode("utf-8")
    out.append(struct.pack("<I", len(text)) + text)
    out.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, seed, epoch = r.unpack("<IQQ")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    text = r.take(n).decode("utf-8")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(text, tensors, seed, epoch, version)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def from_model(model, config_text: str, seed: int, epoch: int) -> Checkpoint:
    return Checkpoint(config_text, {k: p.data.copy() for k, p in model.named_params().items()}, seed, epoch)


def restore_into(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into a model built from the same configuration."""
    params = model.named_params()
    if set(params) != set(ckpt.tensors):
        missing = sorted(set(params) ^ set(ckpt.tensors))
        raise CheckpointError(f"parameter names differ from the model: {missing[:5]}")
    for name, p in params.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != model {p.shape}")
        p.data[...] = arr
