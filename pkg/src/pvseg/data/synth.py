"""Synthetic aerial scenes with exact ground truth.

Each scene is a textured background with optional road/roof rectangles, a few
panel-like distractors (pool and window palettes) that must NOT appear in the
mask, and 0..4 dark rotated panels that define the mask exactly. Panels are
drawn last, so the mask is precisely the union of panel rasterizations.

Generation is deterministic per (spec, seed, sample index): sample i draws
from ``np.random.default_rng([seed, i])``, which also permits parallel
generation by index.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from .manifest import SampleRecord, split_manifest, write_manifest
from .pnm import save_pgm, save_ppm

# RGB palettes in [0,1]; panels are dark blue through black, distractors sit in
# nearby hues (pool cyan-blue, window gray-blue) to make lookalikes.
PANEL_PALETTE = ((0.02, 0.04, 0.10), (0.10, 0.14, 0.30))
POOL_PALETTE = ((0.10, 0.45, 0.55), (0.25, 0.70, 0.80))
WINDOW_PALETTE = ((0.25, 0.28, 0.38), (0.45, 0.50, 0.60))
BACKGROUND_PALETTE = ((0.28, 0.24, 0.18), (0.55, 0.50, 0.40))
ROAD_PALETTE = ((0.40, 0.40, 0.42), (0.62, 0.62, 0.64))


@dataclass
class SyntheticSceneSpec:
    canvas_h: int = 64
    canvas_w: int = 64
    p_empty: float = 0.3
    max_panels: int = 4
    panel_px: tuple[int, int] = (4, 20)
    rotation_deg: tuple[float, float] = (0.0, 180.0)
    distractors: tuple[int, int] = (0, 3)
    road_rects: tuple[int, int] = (0, 2)
    texture_sigma: float = 0.02

    def validate(self) -> None:
        if self.canvas_h < self.panel_px[1] or self.canvas_w < self.panel_px[1]:
            raise DataError(
                f"canvas {self.canvas_h}x{self.canvas_w} too small for panels up to "
                f"{self.panel_px[1]} px")
        if not 0.0 <= self.p_empty <= 1.0:
            raise DataError(f"p_empty must be in [0,1], got {self.p_empty}")
        if self.panel_px[0] < 1 or self.panel_px[0] > self.panel_px[1]:
            raise DataError(f"bad panel size range {self.panel_px}")


def _uniform_color(rng: np.random.Generator, palette) -> np.ndarray:
    lo, hi = np.asarray(palette[0]), np.asarray(palette[1])
    return lo + (hi - lo) * rng.random(3)


def rotated_rect_mask(h: int, w: int, cy: float, cx: float,
                      half_h: float, half_w: float, angle_deg: float) -> np.ndarray:
    """Boolean (h, w): pixel centers inside the rotated rectangle.

    Pixel (r, c) has center (r + 0.5, c + 0.5). A center is inside when its
    coordinates, rotated by -angle about the rectangle center, fall within the
    axis-aligned half extents (boundary inclusive).
    """
    ys = np.arange(h, dtype=np.float64) + 0.5
    xs = np.arange(w, dtype=np.float64) + 0.5
    dy = ys[:, None] - cy
    dx = xs[None, :] - cx
    t = np.deg2rad(angle_deg)
    u = dx * np.cos(t) + dy * np.sin(t)
    v = -dx * np.sin(t) + dy * np.cos(t)
    return (np.abs(u) <= half_w) & (np.abs(v) <= half_h)


def _paint(img: np.ndarray, region: np.ndarray, color: np.ndarray,
           rng: np.random.Generator, sigma: float) -> None:
    noise = rng.normal(0.0, sigma, size=(int(region.sum()), 3))
    img[region] = np.clip(color + noise, 0.0, 1.0)


def generate_scene(spec: SyntheticSceneSpec,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One scene: float64 (H, W, 3) image in [0,1] and uint8 (H, W) binary mask."""
    spec.validate()
    h, w = spec.canvas_h, spec.canvas_w

    base = _uniform_color(rng, BACKGROUND_PALETTE)
    img = np.clip(base + rng.normal(0.0, spec.texture_sigma, size=(h, w, 3)), 0.0, 1.0)

    for _ in range(rng.integers(spec.road_rects[0], spec.road_rects[1] + 1)):
        rh = int(rng.integers(6, max(h // 2, 7)))
        rw = int(rng.integers(6, max(w // 2, 7)))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        region = np.zeros((h, w), dtype=bool)
        region[r0:r0 + rh, c0:c0 + rw] = True
        _paint(img, region, _uniform_color(rng, ROAD_PALETTE), rng, spec.texture_sigma)

    for _ in range(rng.integers(spec.distractors[0], spec.distractors[1] + 1)):
        palette = POOL_PALETTE if rng.random() < 0.5 else WINDOW_PALETTE
        side_lo, side_hi = spec.panel_px
        dh = float(rng.uniform(side_lo, side_hi)) / 2.0
        dw = float(rng.uniform(side_lo, side_hi)) / 2.0
        cy = float(rng.uniform(0, h))
        cx = float(rng.uniform(0, w))
        ang = float(rng.uniform(*spec.rotation_deg))
        region = rotated_rect_mask(h, w, cy, cx, dh, dw, ang)
        _paint(img, region, _uniform_color(rng, palette), rng, spec.texture_sigma)

    mask = np.zeros((h, w), dtype=bool)
    n_panels = 0 if rng.random() < spec.p_empty else int(rng.integers(1, spec.max_panels + 1))
    for _ in range(n_panels):
        side_lo, side_hi = spec.panel_px
        ph = float(rng.uniform(side_lo, side_hi)) / 2.0
        pw = float(rng.uniform(side_lo, side_hi)) / 2.0
        cy = float(rng.uniform(ph, h - ph))
        cx = float(rng.uniform(pw, w - pw))
        ang = float(rng.uniform(*spec.rotation_deg))
        region = rotated_rect_mask(h, w, cy, cx, ph, pw, ang)
        _paint(img, region, _uniform_color(rng, PANEL_PALETTE), rng, spec.texture_sigma)
        mask |= region

    return img, (mask.astype(np.uint8) * 255)


def generate_synthetic(spec: SyntheticSceneSpec, seed: int, n: int,
                       out_dir: str) -> tuple[str, list[SampleRecord]]:
    """Render n scenes to out_dir, assign folds, write manifest.tsv.

    Returns (manifest path, records). Byte-identical across reruns with the
    same (spec, seed, n).
    """
    if n < 1:
        raise DataError(f"need n >= 1 samples, got {n}")
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    records = []
    positives = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img, mask = generate_scene(spec, rng)
        img_path = os.path.join(out_dir, f"img_{i:05d}.ppm")
        mask_path = os.path.join(out_dir, f"mask_{i:05d}.pgm")
        save_ppm(img_path, np.round(img * 255.0).astype(np.uint8))
        save_pgm(mask_path, mask)
        records.append(SampleRecord(image_path=img_path, mask_path=mask_path))
        positives.append(bool(mask.any()))
    if n >= 5:
        records = split_manifest(records, seed, positives=positives)
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(manifest_path, records)
    return manifest_path, records
