"""Supervised segmentation training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backbone import load_backbone_weights
from .data.checkpoint import save_checkpoint
from .errors import DataError, NumericError
from .metrics import ConfusionCounts, confusion, iou
from .model import ModelConfig, build_model_params, forward
from .objective import _bce_mean, batch_loss, fuse, match
from .optim import Adam
from .params import ParamStore
from .seghead import MaskPrediction
from .tensor import Tape, Tensor, backward


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    eval_every: int = 200
    seed: int = 0
    deep_supervision: bool = False
    threshold: float = 0.5
    normalized_fusion: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)


def _deep_supervision_terms(pred: MaskPrediction, gts: np.ndarray) -> Tensor:
    """Mean BCE of every intermediate proposal set against the ground truth.

    Each layer's matched query is re-selected with the final matching rule so
    early layers are pulled toward the same target.
    """
    total = None
    n_layers = len(pred.intermediate)
    bsz = gts.shape[0]
    for m_l in pred.intermediate:
        for b in range(bsz):
            gt = gts[b]
            sample = MaskPrediction(e_pixel=pred.e_pixel, m_hat=m_l[b], c=pred.c[b],
                                    intermediate=[])
            if gt.any():
                i = match(sample, gt)
                term = _bce_mean(m_l[b][i], gt)
            else:
                term = _bce_mean(m_l[b], np.zeros_like(m_l[b].data))
            total = term if total is None else total + term
    return total / float(n_layers * bsz)


def evaluate_model(pairs: Sequence[tuple[np.ndarray, np.ndarray]], params: ParamStore,
                   cfg: TrainConfig) -> ConfusionCounts:
    """Micro confusion counts of fused predictions over (image, mask) pairs."""
    counts = ConfusionCounts()
    bs = max(cfg.batch_size, 1)
    for start in range(0, len(pairs), bs):
        chunk = pairs[start:start + bs]
        images = np.stack([im for im, _ in chunk])
        pred = forward(Tensor(images), params, cfg.model)
        for b, (_, gt) in enumerate(chunk):
            sample = MaskPrediction(e_pixel=pred.e_pixel,
                                    m_hat=Tensor(pred.m_hat.data[b]),
                                    c=Tensor(pred.c.data[b]), intermediate=[])
            fused = fuse(sample, threshold=cfg.threshold,
                         normalized=cfg.normalized_fusion)
            counts = counts + confusion(fused.mask, gt > 0.5)
    return counts


def train(train_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
          val_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
          cfg: TrainConfig,
          init_arrays: Optional[dict[str, np.ndarray]] = None,
          out_path: Optional[str] = None,
          log_rows: Optional[list] = None) -> ParamStore:
    """Train on (image, mask) pairs; returns the parameter store.

    init_arrays, when given, seeds the backbone from a pretraining checkpoint.
    log_rows receives (step, loss, val_iou_or_None) tuples; validation runs
    every eval_every steps and after the final step.
    """
    if len(train_pairs) == 0:
        raise DataError("training requires at least one labeled sample")
    rng = np.random.default_rng(cfg.seed)
    params = build_model_params(rng, cfg.model)
    if init_arrays is not None:
        load_backbone_weights(params, init_arrays)
    opt = Adam(params.tensors(), lr=cfg.lr)

    for step in range(cfg.steps):
        idx = rng.integers(0, len(train_pairs), size=cfg.batch_size)
        images = np.stack([train_pairs[i][0] for i in idx])
        gts = np.stack([train_pairs[i][1] for i in idx])

        with Tape() as tape:
            pred = forward(Tensor(images), params, cfg.model,
                           taped_intermediates=cfg.deep_supervision)
            total = batch_loss(pred, gts)
            if cfg.deep_supervision:
                total = total + _deep_supervision_terms(pred, gts)
        opt.zero_grad()
        try:
            backward(total, tape, params=params.tensors())
        except FloatingPointError as e:
            raise NumericError(f"non-finite loss at step {step}: {e}") from None
        opt.step()

        val_iou = None
        last = step == cfg.steps - 1
        if val_pairs and cfg.eval_every > 0 and ((step + 1) % cfg.eval_every == 0 or last):
            val_iou = iou(evaluate_model(val_pairs, params, cfg))
        if log_rows is not None:
            log_rows.append((step, total.data.item(), val_iou))

    if out_path is not None:
        save_checkpoint(out_path, params.arrays())
    return params
