"""Binary checkpoint format.

Layout (little-endian)::

    magic     8 bytes  b"EMODANCK"
    version   u32
    hdr_len   u32, then hdr_len bytes of UTF-8 JSON (sorted keys)
    n_tensor  u32, then per tensor:
        name_len u32, name bytes, rank u32, rank x u64 dims, raw float64 data

Everything is written in a fixed order, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EMODANCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    hdr = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hdr)), hdr, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8", order="C")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte offset {len(self.data)} "
                                  f"while reading {what} (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{source}: not an emodan checkpoint (bad magic at byte offset 0)")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint format version {version} "
                              f"(this build reads version {FORMAT_VERSION})")
    (hlen,) = r.unpack("<I", "header length")
    start = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header at byte offset {start}: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"tensor {i} name length")
        name = r.take(nlen, f"tensor {i} name").decode(errors="replace")
        (rank,) = r.unpack("<I", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        size = int(np.prod(dims, dtype=np.int64))
        raw = r.take(8 * size, f"data of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes at byte offset {r.pos}")
    return Checkpoint(header, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a crash never leaves a half-written checkpoint at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(data, str(path))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
