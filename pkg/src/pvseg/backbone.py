"""Residual convolutional feature extractor.

A stem (7x7 stride-2 conv + 3x3 stride-2 max pool) followed by four residual
stages yields feature maps at strides 4, 8, 16 and 32. Normalization is
GroupNorm so statistics do not depend on batch composition.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .ops import conv2d, max_pool2d
from .params import ParamStore, he_conv, ones, zeros
from .tensor import Tensor, relu


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 1, 1)
    gn_groups: int = 8


def build_backbone_params(rng: np.random.Generator, cfg: BackboneConfig,
                          store: ParamStore | None = None,
                          prefix: str = "backbone") -> ParamStore:
    """Register stem + stage parameters under dotted names, Kaiming weights."""
    p = store if store is not None else ParamStore()
    ch = cfg.stage_channels
    p.add(f"{prefix}.stem.conv", he_conv(rng, ch[0], 3, 7))
    p.add(f"{prefix}.stem.gn.gamma", ones(ch[0]))
    p.add(f"{prefix}.stem.gn.beta", zeros(ch[0]))
    c_in = ch[0]
    for s, (c_out, n_blocks) in enumerate(zip(ch, cfg.blocks_per_stage), start=1):
        for b in range(n_blocks):
            stride_changes = (s > 1 and b == 0)
            base = f"{prefix}.s{s}.b{b}"
            p.add(f"{base}.conv1", he_conv(rng, c_out, c_in, 3))
            p.add(f"{base}.gn1.gamma", ones(c_out))
            p.add(f"{base}.gn1.beta", zeros(c_out))
            p.add(f"{base}.conv2", he_conv(rng, c_out, c_out, 3))
            p.add(f"{base}.gn2.gamma", ones(c_out))
            p.add(f"{base}.gn2.beta", zeros(c_out))
            if stride_changes or c_in != c_out:
                p.add(f"{base}.proj", he_conv(rng, c_out, c_in, 1))
            c_in = c_out
    return p


def _block(x: Tensor, p: ParamStore, base: str, stride: int, groups: int) -> Tensor:
    y = conv2d(x, p[f"{base}.conv1"], stride=stride, padding=1)
    y = relu(F.group_norm(y, p[f"{base}.gn1.gamma"], p[f"{base}.gn1.beta"], groups=groups))
    y = conv2d(y, p[f"{base}.conv2"], stride=1, padding=1)
    y = F.group_norm(y, p[f"{base}.gn2.gamma"], p[f"{base}.gn2.beta"], groups=groups)
    skip = x if f"{base}.proj" not in p else conv2d(x, p[f"{base}.proj"], stride=stride)
    return relu(y + skip)


def extract_features(image: Tensor, params: ParamStore, cfg: BackboneConfig,
                     prefix: str = "backbone") -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Four feature maps at strides 4/8/16/32; extents must divide by 32."""
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        raise ValueError(f"input extents {h}x{w} must be divisible by 32")
    x = conv2d(image, params[f"{prefix}.stem.conv"], stride=2, padding=3)
    x = relu(F.group_norm(x, params[f"{prefix}.stem.gn.gamma"],
                          params[f"{prefix}.stem.gn.beta"], groups=cfg.gn_groups))
    x = max_pool2d(x, k=3, stride=2, padding=1)
    feats = []
    for s, n_blocks in enumerate(cfg.blocks_per_stage, start=1):
        for b in range(n_blocks):
            stride = 2 if (s > 1 and b == 0) else 1
            x = _block(x, params, f"{prefix}.s{s}.b{b}", stride, cfg.gn_groups)
        feats.append(x)
    return tuple(feats)


def load_backbone_weights(params: ParamStore, arrays: dict[str, np.ndarray],
                          prefix: str = "backbone") -> None:
    """Copy checkpoint arrays into the store; names the first offending tensor."""
    params.load_arrays(arrays, prefix=prefix)
