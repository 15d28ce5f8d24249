"""Sample records, the tab-separated manifest format, and fold assignment.

A manifest line is `image<TAB>mask<TAB>split` with an optional fourth column
carrying the ground sample distance in cm/pixel. `-` marks a missing mask or
an unassigned split. Parsing is total: every line yields a record or a
line-numbered error.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import DataError
from .atomicio import write_text_atomic

FOLDS = ("train", "test", "val")
FOLD_FRACTIONS = (0.6, 0.2, 0.2)
UNASSIGNED = "-"


@dataclass
class SampleRecord:
    image_path: str
    mask_path: Optional[str] = None
    split: str = UNASSIGNED
    gsd_cm_per_px: Optional[float] = None


def parse_manifest(path: str) -> list[SampleRecord]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataError(f"{path}: cannot read ({e.strerror})") from None
    base = os.path.dirname(path)
    records = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise DataError(f"{path}:{i}: expected 3 or 4 tab-separated fields, got {len(cols)}")
        image, mask, split = cols[0], cols[1], cols[2]
        if not image or image == UNASSIGNED:
            raise DataError(f"{path}:{i}: missing image path")
        if split not in FOLDS and split != UNASSIGNED:
            raise DataError(f"{path}:{i}: unknown split {split!r}")
        gsd = None
        if len(cols) == 4 and cols[3] != UNASSIGNED:
            try:
                gsd = float(cols[3])
            except ValueError:
                raise DataError(f"{path}:{i}: bad GSD value {cols[3]!r}") from None
        records.append(SampleRecord(
            image_path=os.path.join(base, image),
            mask_path=None if mask == UNASSIGNED else os.path.join(base, mask),
            split=split, gsd_cm_per_px=gsd))
    return records


def write_manifest(path: str, records: Sequence[SampleRecord]) -> None:
    """Write records with paths stored relative to the manifest's directory."""
    base = os.path.dirname(path)
    lines = []
    for r in records:
        image = os.path.relpath(r.image_path, base) if base else r.image_path
        mask = (os.path.relpath(r.mask_path, base) if base else r.mask_path) \
            if r.mask_path else UNASSIGNED
        cols = [image, mask, r.split]
        if r.gsd_cm_per_px is not None:
            cols.append(repr(r.gsd_cm_per_px))
        lines.append("\t".join(cols))
    write_text_atomic(path, "\n".join(lines) + "\n")


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    ideal = [n * f for f in fractions]
    base = [int(x) for x in ideal]
    short = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(ideal[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def split_manifest(records: Sequence[SampleRecord], seed: int,
                   positives: Optional[Sequence[bool]] = None) -> list[SampleRecord]:
    """Assign 60/20/20 folds, stratified by positive/negative sample status.

    A record is positive when its mask has at least one foreground pixel.
    ``positives`` supplies that flag per record; when omitted it is derived by
    reading each mask (records without a mask count as negative).
    """
    records = list(records)
    if len(records) < 5:
        raise DataError(f"need at least 5 records to split, got {len(records)}")
    if positives is None:
        from .pnm import load_pgm
        positives = [bool((load_pgm(r.mask_path) > 127).any()) if r.mask_path else False
                     for r in records]
    if len(positives) != len(records):
        raise DataError("positives flags do not align with records")

    rng = np.random.default_rng(seed)
    out = [SampleRecord(r.image_path, r.mask_path, r.split, r.gsd_cm_per_px)
           for r in records]
    for stratum in (True, False):
        idx = np.array([i for i, p in enumerate(positives) if bool(p) == stratum], dtype=int)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        counts = _largest_remainder(idx.size, FOLD_FRACTIONS)
        start = 0
        for fold, k in zip(FOLDS, counts):
            for i in idx[start:start + k]:
                out[i].split = fold
            start += k
    return out


def fold_records(records: Sequence[SampleRecord], fold: str) -> list[SampleRecord]:
    if fold not in FOLDS:
        raise DataError(f"unknown fold {fold!r}; expected one of {FOLDS}")
    return [r for r in records if r.split == fold]
