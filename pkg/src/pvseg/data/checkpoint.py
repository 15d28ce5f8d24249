"""Binary checkpoint container for named tensors.

Layout, all integers little-endian:

    magic   4 bytes  b"S3FK"
    version u32      (currently 1)
    count   u32      number of tensors
    per tensor:
        name_len u32, name UTF-8 bytes
        rank     u32, extents u64[rank]
        dtype    u32  (0 = f32, 1 = f64)
        data     raw little-endian values, C order
    crc32   u32      of every byte above it

Round trips are bit-identical; loads validate magic, version and CRC.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from ..errors import DataError
from .atomicio import write_bytes_atomic

MAGIC = b"S3FK"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write name -> array in insertion order."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _TAG_FOR:
            raise DataError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(struct.pack("<I", _TAG_FOR[arr.dtype]))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    payload = b"".join(parts)
    write_bytes_atomic(path, payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read name -> array, preserving write order; rejects bad magic/version/CRC."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"{path}: cannot read ({e.strerror})") from None
    if len(blob) < 16:
        raise DataError(f"{path}: too short to be a checkpoint")
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint file")
    payload, crc_bytes = blob[:-4], blob[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(payload):
        raise DataError(f"{path}: CRC mismatch, file is corrupt")
    r = _Reader(payload, path)
    r.take(4)  # magic, already validated
    version = r.u32()
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    count = r.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        tag = r.u32()
        if tag not in _DTYPE_TAGS:
            raise DataError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        dt = _DTYPE_TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(payload):
        raise DataError(f"{path}: {len(payload) - r.pos} trailing bytes after last tensor")
    return out
