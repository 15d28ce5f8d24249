"""Differentiable building blocks composed from the tensor primitives.

Softmax and the normalisation layers get fused closures (one tape node each)
because they sit on every hot path; everything else is a thin composition.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, _accum, _make_out, softplus


def softmax(x: Tensor, axis: int = -1, tau: float = 1.0) -> Tensor:
    """Tempered softmax along one axis, x is divided by tau before exponentiation.

    The row maximum is subtracted before exponentiation; softmax is invariant
    to that shift so the subtracted value is treated as a constant.
    """
    if not tau > 0.0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accum(x, p * (g - dot) / tau)

    return _make_out(p, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1, tau: float = 1.0) -> Tensor:
    if not tau > 0.0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bwd(g):
        _accum(x, (g - p * g.sum(axis=axis, keepdims=True)) / tau)

    return _make_out(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    return _make_out(out, (x, gamma, beta), bwd)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 8,
               eps: float = 1e-5) -> Tensor:
    """Normalise (…, C, H, W) per sample over channel groups."""
    xd = x.data
    squeezed = xd.ndim == 3
    if squeezed:
        xd = xd[None]
    b, c, h, w = xd.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by {groups} groups")
    xg = xd.reshape(b, groups, c // groups * h * w)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(b, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    if squeezed:
        out = out[0]

    def bwd(g):
        gd = g[None] if squeezed else g
        if gamma.requires_grad:
            _accum(gamma, (gd * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, gd.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = (gd * gamma.data.reshape(1, c, 1, 1)).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xh).mean(axis=-1, keepdims=True)
            grad = (inv * (gx - m1 - xh * m2)).reshape(b, c, h, w)
            _accum(x, grad[0] if squeezed else grad)

    return _make_out(out, (x, gamma, beta), bwd)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (…, n_in) @ weight.T (n_in, n_out) + bias."""
    out = x @ weight.transpose()
    if bias is not None:
        out = out + bias
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from raw logits.

    Uses the identity -[y log s + (1-y) log(1-s)] = softplus(x) - x*y, which
    equals clamping the probabilities away from 0/1 up to float precision but
    never produces inf.
    """
    t = np.asarray(targets, dtype=logits.data.dtype)
    per = softplus(logits) - logits * Tensor(t)
    return per.mean()


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over (…, L, C) sequences.

    mask, if given, broadcasts against (…, n_heads, Lq, Lk) and marks
    positions that may NOT be attended to with True. Rows where every key is
    masked fall back to attending everywhere, so no row ever normalises over
    an empty set.
    """
    lq, c = q.shape[-2], q.shape[-1]
    if c % n_heads:
        raise ValueError(f"embed dim {c} not divisible by {n_heads} heads")
    d = c // n_heads

    def split(t: Tensor):
        lead = t.shape[:-2]
        t2 = t.reshape(*lead, t.shape[-2], n_heads, d)
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return t2.transpose(*axes)  # (…, n_heads, L, d)

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ kh.transpose(*range(qh.ndim - 2), qh.ndim - 1, qh.ndim - 2))
    scores = scores * Tensor(np.asarray(1.0 / np.sqrt(d), dtype=q.data.dtype))
    if mask is not None:
        keep_all = mask.all(axis=-1, keepdims=True)
        eff = np.where(keep_all, False, mask)
        neg = np.zeros(np.broadcast_shapes(eff.shape, scores.shape), dtype=scores.data.dtype)
        neg[np.broadcast_to(eff, neg.shape)] = -1e9
        scores = scores + Tensor(neg)
    attn = softmax(scores, axis=-1)
    out = attn @ vh
    lead = out.shape[:-3]
    n_lead = len(lead)
    axes = tuple(range(n_lead)) + (n_lead + 1, n_lead, n_lead + 2)
    return out.transpose(*axes).reshape(*lead, lq, c)
