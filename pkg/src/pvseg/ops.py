"""Convolution, pooling and resampling primitives.

All operations accept (C, H, W) or batched (B, C, H, W) inputs; unbatched
inputs are promoted internally and squeezed on the way out. Convolutions use
im2col + GEMM; their adjoints share one scatter helper, so transposed
convolution is literally the adjoint of the forward convolution.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, _accum, _make_out


def _pad_hw(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  constant_values=value)


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided view (B, C, k, k, Ho, Wo) over a padded (B, C, Hp, Wp) array."""
    b, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, k, k, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride), writeable=False)


def _col2im(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (B, C, k, k, Ho, Wo) patches."""
    b, c, k, _, ho, wo = cols.shape
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += cols[:, :, ki, kj]
    return out


def _promote(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ValueError(f"expected a (C,H,W) or (B,C,H,W) tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (…,C_in,H,W) with weight (C_out,C_in,k,k)."""
    xd, squeezed = _promote(x)
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"conv2d expects square kernels, got {k}x{k2}")
    b, c, h, w = xd.shape
    if c != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {c_in}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = _pad_hw(xd, padding)
    cols = np.ascontiguousarray(_im2col(xp, k, stride)).reshape(b, c * k * k, -1)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    w2 = weight.data.reshape(c_out, c * k * k)
    out = np.matmul(w2, cols).reshape(b, c_out, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
    if squeezed:
        out = out[0]

    def bwd(g):
        gd = g[None] if squeezed else g
        gcols = gd.reshape(b, c_out, -1)
        if weight.requires_grad:
            gw = np.matmul(gcols, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(weight, gw.reshape(c_out, c_in, k, k))
        if bias is not None and bias.requires_grad:
            _accum(bias, gd.sum(axis=(0, 2, 3)).reshape(bias.shape))
        if x.requires_grad:
            gcol = np.matmul(w2.T, gcols).reshape(b, c, k, k, ho, wo)
            gxp = _col2im(gcol, h + 2 * padding, w + 2 * padding, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
            _accum(x, gx[0] if squeezed else gx)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make_out(out, inputs, bwd)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                      stride: int = 2) -> Tensor:
    """Transposed convolution with weight (C_in, C_out, k, k); no padding.

    Output spatial extent is (H-1)*stride + k, so k = stride = 2 exactly
    doubles the input and each output pixel sees one input pixel.
    """
    xd, squeezed = _promote(x)
    c_in, c_out, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"transposed_conv2d expects square kernels, got {k}x{k2}")
    b, c, h, w = xd.shape
    if c != c_in:
        raise ValueError(f"transposed_conv2d channel mismatch: input has {c}, weight expects {c_in}")
    ho = (h - 1) * stride + k
    wo = (w - 1) * stride + k
    w2 = weight.data.reshape(c_in, c_out * k * k)
    cols = np.matmul(w2.T, xd.reshape(b, c_in, -1)).reshape(b, c_out, k, k, h, w)
    out = _col2im(cols, ho, wo, stride)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
    if squeezed:
        out = out[0]

    def bwd(g):
        gd = g[None] if squeezed else g
        gview = np.ascontiguousarray(_im2col(gd, k, stride)).reshape(b, c_out * k * k, -1)
        if x.requires_grad:
            gx = np.matmul(w2, gview).reshape(b, c_in, h, w)
            _accum(x, gx[0] if squeezed else gx)
        if weight.requires_grad:
            gw = np.matmul(xd.reshape(b, c_in, -1), gview.transpose(0, 2, 1)).sum(axis=0)
            _accum(weight, gw.reshape(c_in, c_out, k, k))
        if bias is not None and bias.requires_grad:
            _accum(bias, gd.sum(axis=(0, 2, 3)).reshape(bias.shape))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make_out(out, inputs, bwd)


def max_pool2d(x: Tensor, k: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    xd, squeezed = _promote(x)
    b, c, h, w = xd.shape
    xp = _pad_hw(xd, padding, value=-np.inf)
    view = _im2col(xp, k, stride)
    ho, wo = view.shape[-2:]
    flat = np.ascontiguousarray(view).reshape(b, c, k * k, ho, wo)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
    if squeezed:
        out = out[0]

    def bwd(g):
        gd = g[None] if squeezed else g
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[:, :, None], gd[:, :, None], axis=2)
        gxp = _col2im(gflat.reshape(b, c, k, k, ho, wo), h + 2 * padding, w + 2 * padding, stride)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        _accum(x, gx[0] if squeezed else gx)

    return _make_out(out, (x,), bwd)


def _linear_weights(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic 1-D interpolation matrix (n_out, n_in), align_corners=False."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = n_in / n_out
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo).astype(dtype)
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def bilinear_resize(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Separable bilinear resampling of the trailing two axes."""
    xd, squeezed = _promote(x)
    b, c, h, w = xd.shape
    ho, wo = out_hw
    ry = _linear_weights(h, ho, xd.dtype)
    rx = _linear_weights(w, wo, xd.dtype)
    out = np.einsum("oh,bchw,pw->bcop", ry, xd, rx, optimize=True)
    if squeezed:
        out = out[0]

    def bwd(g):
        gd = g[None] if squeezed else g
        gx = np.einsum("oh,bcop,pw->bchw", ry, gd, rx, optimize=True)
        _accum(x, gx[0] if squeezed else gx)

    return _make_out(out, (x,), bwd)


def resize_array_bilinear(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Plain-ndarray bilinear resize of the trailing two axes (no gradients)."""
    lead = arr.shape[:-2]
    h, w = arr.shape[-2:]
    ho, wo = out_hw
    ry = _linear_weights(h, ho, np.float64)
    rx = _linear_weights(w, wo, np.float64)
    flat = arr.reshape(-1, h, w).astype(np.float64)
    out = np.einsum("oh,nhw,pw->nop", ry, flat, rx, optimize=True)
    return out.reshape(*lead, ho, wo).astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


def resize_array_nearest(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of the trailing two axes (for masks)."""
    h, w = arr.shape[-2:]
    ho, wo = out_hw
    yi = np.minimum((np.arange(ho) + 0.5) * (h / ho), h - 1).astype(int)
    xi = np.minimum((np.arange(wo) + 0.5) * (w / wo), w - 1).astype(int)
    return arr[..., yi[:, None], xi[None, :]]
