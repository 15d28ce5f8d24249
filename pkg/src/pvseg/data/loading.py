"""Decode manifest records into model-ready tensors."""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import DataError
from ..ops import resize_array_bilinear, resize_array_nearest
from ..tensor import Tensor
from .manifest import SampleRecord
from .pnm import load_pgm, load_ppm

STRIDE = 32


def nearest_multiple(n: int, base: int = STRIDE) -> int:
    """Closest positive multiple of base; exact midpoints round down (400 -> 384)."""
    lo = max((n // base) * base, base)
    hi = lo + base
    return lo if n - lo <= hi - n else hi


def load_image(path: str) -> np.ndarray:
    """PPM -> float32 (3, H, W) in [0,1], resized so H and W divide by 32."""
    raw = load_ppm(path).astype(np.float32) / 255.0
    img = raw.transpose(2, 0, 1)
    h, w = img.shape[1:]
    th, tw = nearest_multiple(h), nearest_multiple(w)
    if (th, tw) != (h, w):
        img = resize_array_bilinear(img, (th, tw)).astype(np.float32)
    return img


def load_mask(path: str, out_hw: Optional[tuple[int, int]] = None) -> np.ndarray:
    """PGM -> float32 (H, W) binary {0,1}; nearest-neighbour resized if needed."""
    raw = load_pgm(path)
    binary = (raw > 127).astype(np.float32)
    h, w = binary.shape
    th, tw = out_hw if out_hw is not None else (nearest_multiple(h), nearest_multiple(w))
    if (th, tw) != (h, w):
        binary = resize_array_nearest(binary, (th, tw))
    return binary


def load_sample(record: SampleRecord) -> tuple[Tensor, Optional[Tensor]]:
    """Image tensor in [0,1] plus its binary mask tensor when labeled."""
    raw = load_ppm(record.image_path)
    h, w = raw.shape[:2]
    img = raw.astype(np.float32).transpose(2, 0, 1) / 255.0
    th, tw = nearest_multiple(h), nearest_multiple(w)
    if (th, tw) != (h, w):
        img = resize_array_bilinear(img, (th, tw)).astype(np.float32)
    if record.mask_path is None:
        return Tensor(img), None
    raw_mask = load_pgm(record.mask_path)
    if raw_mask.shape != (h, w):
        raise DataError(
            f"{record.mask_path}: mask extent {raw_mask.shape} does not match "
            f"image extent {(h, w)}")
    mask = load_mask(record.mask_path, out_hw=(th, tw))
    return Tensor(img), Tensor(mask)
