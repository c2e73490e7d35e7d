"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DPSNETCK"            8-byte magic
    u32 version
    u32 n, n bytes         UTF-8 config text
    u64 step
    u32 count              number of tensor records
    count x record:
        u32 n, n bytes     UTF-8 tensor name
        u32 rank
        rank x u64         extents
        prod(extents) x f8 raw little-endian doubles, C order
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DPSNETCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint or unsupported format version."""


@dataclass
class Checkpoint:
    config_text: str
    step: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _pack_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _pack_str(buf, ckpt.config_text)
    buf.write(struct.pack("<Q", ckpt.step))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        _pack_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic, not a DPS-Net checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    config_text = r.string()
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last record")
    return Checkpoint(config_text, step, tensors)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
