"""Pixel-level segmentation scores from confusion counts.

Counts are integers and additive, so dataset-level (micro) scores pool the
counts first and divide once. When prediction and ground truth are both empty
the overlap ratios are 0/0; that is scored 1 (the prediction is perfect).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Count pixels of a binary prediction against a binary ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)))


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def f1(c: ConfusionCounts) -> float:
    denom = c.tp + 0.5 * (c.fp + c.fn)
    return 1.0 if denom == 0 else c.tp / denom


def accuracy(c: ConfusionCounts) -> float:
    return 1.0 if c.total == 0 else (c.tp + c.tn) / c.total


def evaluate(pairs: Iterable[tuple[np.ndarray, np.ndarray]], fold: str = "test") -> dict:
    """Micro-aggregate (prediction, ground truth) mask pairs into a report."""
    counts = ConfusionCounts()
    n = 0
    for pred, gt in pairs:
        counts = counts + confusion(pred, gt)
        n += 1
    report = {"fold": fold, "n_images": n}
    report.update(asdict(counts))
    report.update(iou=iou(counts), f1=f1(counts), accuracy=accuracy(counts))
    return report
