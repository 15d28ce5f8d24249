"""Binary NetPBM containers: P6 (color) for images, P5 (gray) for masks.

Chosen for bit-exact, codec-free storage. Only 8-bit maxval 255 is supported.
"""
from __future__ import annotations

import numpy as np

from ..errors import DataError
from .atomicio import write_bytes_atomic


def _read_header_tokens(blob: bytes, path: str) -> tuple[bytes, list[int], int]:
    """Parse magic + 3 integer tokens, honoring '#' comments; return data offset."""
    if len(blob) < 2:
        raise DataError(f"{path}: truncated file")
    magic = blob[:2]
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        try:
            tokens.append(int(blob[start:pos]))
        except ValueError:
            raise DataError(f"{path}: non-numeric header token {blob[start:pos]!r}") from None
    pos += 1  # single whitespace byte separates header from raster
    return magic, tokens, pos


def _load_raster(path: str, expected_magic: bytes, channels: int) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"{path}: cannot read ({e.strerror})") from None
    magic, (w, h, maxval), off = _read_header_tokens(blob, path)
    if magic != expected_magic:
        raise DataError(f"{path}: expected {expected_magic.decode()} file, found magic {magic!r}")
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, found {maxval}")
    if w <= 0 or h <= 0:
        raise DataError(f"{path}: invalid extents {w}x{h}")
    n = w * h * channels
    raster = blob[off:off + n]
    if len(raster) != n:
        raise DataError(f"{path}: raster has {len(raster)} bytes, expected {n}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def load_ppm(path: str) -> np.ndarray:
    """Read a P6 file as uint8 (H, W, 3)."""
    return _load_raster(path, b"P6", 3)


def load_pgm(path: str) -> np.ndarray:
    """Read a P5 file as uint8 (H, W)."""
    return _load_raster(path, b"P5", 1)


def save_ppm(path: str, img: np.ndarray) -> None:
    """Write uint8 (H, W, 3) as P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DataError(f"save_ppm expects uint8 (H,W,3), got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    write_bytes_atomic(path, header + img.tobytes())


def save_pgm(path: str, gray: np.ndarray) -> None:
    """Write uint8 (H, W) as P5."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise DataError(f"save_pgm expects uint8 (H,W), got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    write_bytes_atomic(path, header + gray.tobytes())
