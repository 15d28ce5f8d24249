"""Full segmentation model: backbone, pixel decoder, query decoder, heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backbone import BackboneConfig, build_backbone_params, extract_features
from .objective import FusedMask, fuse
from .params import ParamStore
from .seghead import (MaskPrediction, SegHeadConfig, build_seghead_params, decode_queries,
                      pixel_decode, pixel_embedding, predict)
from .tensor import Tensor


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: SegHeadConfig = field(default_factory=SegHeadConfig)


def build_model_params(rng: np.random.Generator, cfg: ModelConfig) -> ParamStore:
    p = build_backbone_params(rng, cfg.backbone)
    build_seghead_params(rng, cfg.head, cfg.backbone.stage_channels, store=p)
    return p


def forward(image: Tensor, params: ParamStore, cfg: ModelConfig,
            trace: Optional[list] = None,
            taped_intermediates: bool = False) -> MaskPrediction:
    """Image(s) -> MaskPrediction with proposal masks at full input resolution."""
    feats = extract_features(image, params, cfg.backbone)
    enc = pixel_decode(feats, params, cfg.head)
    e_pixel = pixel_embedding(enc[0], params, cfg.head)
    q_final, intermediate = decode_queries(params["dec.q0"], enc, e_pixel, params,
                                           cfg.head, trace=trace,
                                           taped_intermediates=taped_intermediates)
    return predict(q_final, e_pixel, params, cfg.head, intermediate=intermediate)


def segment(image: Tensor, params: ParamStore, cfg: ModelConfig,
            threshold: float = 0.5, normalized: bool = True) -> FusedMask:
    """Inference helper: forward one (3, H, W) image and fuse its proposals."""
    pred = forward(image, params, cfg)
    return fuse(pred, threshold=threshold, normalized=normalized)
