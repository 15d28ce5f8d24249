"""Query selection, training loss, and proposal fusion.

Ground truth is one binary mask per image. Training selects the single query
whose classification-and-mask cost is lowest and penalizes only that query;
images with an empty mask instead push every query toward rejection and an
empty mask. At inference, proposals are blended into one probability map,
weighted by the normalized classification scores, then thresholded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .seghead import MaskPrediction
from .tensor import Tensor

PROB_FLOOR = 1e-7
FUSE_EPS = 1e-7


def _log_clamped(p: Tensor) -> Tensor:
    """log of probabilities floored at 1e-7; complements handle the upper clamp."""
    return T.log(T.clip_min(p, PROB_FLOOR))


def _bce_mean(mask_logits: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-mean BCE between sigmoid(mask_logits) and a binary target."""
    t = np.asarray(target, dtype=mask_logits.data.dtype)
    p = T.sigmoid(mask_logits)
    pos = _log_clamped(p) * Tensor(t)
    neg = _log_clamped(1.0 - p) * Tensor(1.0 - t)
    return -(pos + neg).mean()


def _query_costs(pred: MaskPrediction, gt: np.ndarray) -> np.ndarray:
    """Cost per query: -log sigma(C_i) + pixel-mean BCE of mask i, in float64."""
    c = pred.c.data.astype(np.float64)
    m = pred.m_hat.data.astype(np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    p_cls = np.clip(1.0 / (1.0 + np.exp(-c)), PROB_FLOOR, 1.0 - PROB_FLOOR)
    p_m = np.clip(1.0 / (1.0 + np.exp(-m)), PROB_FLOOR, 1.0 - PROB_FLOOR)
    bce = -(gt * np.log(p_m) + (1.0 - gt) * np.log(1.0 - p_m)).mean(axis=(-2, -1))
    return -np.log(p_cls) + bce


def match(pred: MaskPrediction, gt: np.ndarray) -> int:
    """Index of the cheapest query for a non-empty ground-truth mask.

    Ties go to the lowest index (argmin returns the first minimum).
    """
    gt = np.asarray(gt)
    if not gt.any():
        raise ValueError("match requires a non-empty ground truth mask")
    if pred.c.ndim != 1:
        raise ValueError("match operates on a single sample, not a batch")
    return int(np.argmin(_query_costs(pred, gt)))


def loss(pred: MaskPrediction, gt: np.ndarray) -> Tensor:
    """Eq-style loss for one sample.

    Non-empty mask: classification and mask BCE of the matched query.
    Empty mask: mean over queries of the rejection term plus the BCE of every
    mask against all-zeros.
    """
    gt = np.asarray(gt, dtype=np.float32)
    if gt.any():
        i = match(pred, gt)
        cls_term = -_log_clamped(T.sigmoid(pred.c[i]))
        return cls_term + _bce_mean(pred.m_hat[i], gt)
    cls_term = -_log_clamped(1.0 - T.sigmoid(pred.c)).mean()
    mask_term = _bce_mean(pred.m_hat, np.zeros_like(pred.m_hat.data))
    return cls_term + mask_term


def batch_loss(pred: MaskPrediction, gts: np.ndarray) -> Tensor:
    """Mean per-sample loss over a batched prediction."""
    n = pred.c.shape[0]
    per = []
    for b in range(n):
        sample = MaskPrediction(e_pixel=pred.e_pixel, m_hat=pred.m_hat[b],
                                c=pred.c[b], intermediate=[])
        per.append(loss(sample, gts[b]))
    total = per[0]
    for t in per[1:]:
        total = total + t
    return total / float(n)


@dataclass
class FusedMask:
    mask: np.ndarray      # binary uint8 (H, W)
    prob: np.ndarray      # float32 (H, W) in [0, 1]


def fuse(pred: MaskPrediction, threshold: float = 0.5, normalized: bool = True) -> FusedMask:
    """Blend proposals into one mask using classification-score weights.

    Default: weights w_i = sigma(C_i) / max(sum_j sigma(C_j), eps), giving a
    convex combination of mask probabilities. The literal unnormalized sum of
    sigma(C_i) * sigma(M_i) is kept behind normalized=False (clipped to [0,1]
    so the probability-map contract still holds).
    """
    if pred.c.ndim != 1:
        raise ValueError("fuse operates on a single sample, not a batch")
    scores = 1.0 / (1.0 + np.exp(-pred.c.data.astype(np.float64)))
    probs = 1.0 / (1.0 + np.exp(-pred.m_hat.data.astype(np.float64)))
    if normalized:
        total = scores.sum()
        if total < FUSE_EPS:
            fused = np.zeros(probs.shape[-2:], dtype=np.float64)
        else:
            w = scores / max(total, FUSE_EPS)
            fused = np.einsum("n,nhw->hw", w, probs)
    else:
        fused = np.clip(np.einsum("n,nhw->hw", scores, probs), 0.0, 1.0)
    mask = (fused >= threshold).astype(np.uint8)
    return FusedMask(mask=mask, prob=fused.astype(np.float32))
