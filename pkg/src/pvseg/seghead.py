"""Segmentation head: pixel decoder plus masked-attention query decoder.

The pixel decoder projects the three coarsest backbone maps to a common width,
runs dense self-attention over their concatenated tokens (at 64x64 input that
is 8*8 + 4*4 + 2*2 = 84 tokens), and fuses the finest map in with a lateral
1x1 conv plus upsampling. A per-pixel embedding at full input resolution is
decoded from D1 by two stride-2 transposed convolutions.

The query decoder runs exactly four layers over the enriched maps from the
lowest resolution to the highest (D4, D3, D2, D1). Each layer predicts
proposal mask logits from the current queries, thresholds a downsampled
sigmoid of them at 0.5 into a boolean attention mask (a query whose mask is
empty falls back to attending everywhere), then applies masked cross
attention, query self attention and a feed-forward block, each as a pre-norm
residual step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import functional as F
from .ops import bilinear_resize, conv2d, resize_array_bilinear, transposed_conv2d
from .params import ParamStore, he_conv, he_linear, he_transposed_conv, ones, zeros
from .tensor import Tensor, concat, relu


@dataclass
class SegHeadConfig:
    n_queries: int = 16
    c_e: int = 32
    c_d: int = 64
    n_heads: int = 4
    encoder_rounds: int = 3
    ffn_hidden: int = 128
    decoder_layers: int = 4


@dataclass
class MaskPrediction:
    e_pixel: Tensor                     # (C_e, H, W) or batched
    m_hat: Tensor                       # (N, H, W) mask logits, or batched
    c: Tensor                           # (N,) classification logits, or batched
    intermediate: list                  # per-layer proposal mask logits


def sincos_positions(c: int, h: int, w: int) -> np.ndarray:
    """Fixed 2-D sin/cos position codes, (h*w, c); first half rows, second columns."""
    if c % 4:
        raise ValueError(f"position encoding width {c} must divide by 4")
    ch = c // 2
    freqs = 1.0 / (10000.0 ** (np.arange(0, ch, 2, dtype=np.float64) / ch))

    def axis_code(n: int) -> np.ndarray:
        ang = np.arange(n, dtype=np.float64)[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    ey = axis_code(h)
    ex = axis_code(w)
    out = np.empty((h, w, c), dtype=np.float64)
    out[..., :ch] = ey[:, None, :]
    out[..., ch:] = ex[None, :, :]
    return out.reshape(h * w, c).astype(np.float32)


def build_seghead_params(rng: np.random.Generator, cfg: SegHeadConfig,
                         feature_channels: tuple[int, int, int, int],
                         store: Optional[ParamStore] = None) -> ParamStore:
    p = store if store is not None else ParamStore()
    cd, ce = cfg.c_d, cfg.c_e
    # encoder: input projections for F2..F4, level embeddings, attention rounds
    for lvl, c_in in zip((2, 3, 4), feature_channels[1:]):
        p.add(f"enc.in{lvl}.w", he_conv(rng, cd, c_in, 1))
        p.add(f"enc.in{lvl}.b", zeros(cd))
        p.add(f"enc.level{lvl}", rng.normal(0.0, 0.02, size=(cd,)).astype(np.float32))
    for r in range(cfg.encoder_rounds):
        base = f"enc.r{r}"
        p.add(f"{base}.ln.gamma", ones(cd))
        p.add(f"{base}.ln.beta", zeros(cd))
        for proj in ("q", "k", "v", "o"):
            p.add(f"{base}.{proj}.w", he_linear(rng, cd, cd))
            p.add(f"{base}.{proj}.b", zeros(cd))
    p.add("enc.lateral.w", he_conv(rng, cd, feature_channels[0], 1))
    p.add("enc.lateral.b", zeros(cd))
    # per-pixel embedding tower from D1
    p.add("epix.t1.w", he_transposed_conv(rng, cd, cd, 2))
    p.add("epix.t1.b", zeros(cd))
    p.add("epix.t2.w", he_transposed_conv(rng, cd, cd, 2))
    p.add("epix.t2.b", zeros(cd))
    p.add("epix.proj.w", he_conv(rng, ce, cd, 1))
    p.add("epix.proj.b", zeros(ce))
    # query decoder
    p.add("dec.q0", rng.normal(0.0, 0.02, size=(cfg.n_queries, ce)).astype(np.float32))
    for l in range(cfg.decoder_layers):
        base = f"dec.l{l}"
        p.add(f"{base}.cross.ln.gamma", ones(ce))
        p.add(f"{base}.cross.ln.beta", zeros(ce))
        p.add(f"{base}.cross.q.w", he_linear(rng, cd, ce))
        p.add(f"{base}.cross.q.b", zeros(cd))
        p.add(f"{base}.cross.k.w", he_linear(rng, cd, cd))
        p.add(f"{base}.cross.k.b", zeros(cd))
        p.add(f"{base}.cross.v.w", he_linear(rng, cd, cd))
        p.add(f"{base}.cross.v.b", zeros(cd))
        p.add(f"{base}.cross.o.w", he_linear(rng, ce, cd))
        p.add(f"{base}.cross.o.b", zeros(ce))
        p.add(f"{base}.self.ln.gamma", ones(ce))
        p.add(f"{base}.self.ln.beta", zeros(ce))
        for proj in ("q", "k", "v", "o"):
            p.add(f"{base}.self.{proj}.w", he_linear(rng, ce, ce))
            p.add(f"{base}.self.{proj}.b", zeros(ce))
        p.add(f"{base}.ffn.ln.gamma", ones(ce))
        p.add(f"{base}.ffn.ln.beta", zeros(ce))
        p.add(f"{base}.ffn.w1", he_linear(rng, cfg.ffn_hidden, ce))
        p.add(f"{base}.ffn.b1", zeros(cfg.ffn_hidden))
        p.add(f"{base}.ffn.w2", he_linear(rng, ce, cfg.ffn_hidden))
        p.add(f"{base}.ffn.b2", zeros(ce))
    p.add("dec.final_ln.gamma", ones(ce))
    p.add("dec.final_ln.beta", zeros(ce))
    # prediction heads on the final queries
    p.add("pred.mask.w1", he_linear(rng, ce, ce))
    p.add("pred.mask.b1", zeros(ce))
    p.add("pred.mask.w2", he_linear(rng, ce, ce))
    p.add("pred.mask.b2", zeros(ce))
    p.add("pred.cls.w1", he_linear(rng, ce, ce))
    p.add("pred.cls.b1", zeros(ce))
    p.add("pred.cls.w2", he_linear(rng, 1, ce))
    p.add("pred.cls.b2", zeros(1))
    return p


def _as_tensor(x: Union[np.ndarray, Tensor]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tokens(x: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, h*w, C)."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(0, 2, 1)


def _untokens(x: Tensor, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    return x.transpose(0, 2, 1).reshape(b, c, h, w)


def _attn_block(x: Tensor, kv: Tensor, p: ParamStore, base: str, n_heads: int,
                q_pos: Union[np.ndarray, Tensor, None] = None,
                k_pos: Union[np.ndarray, Tensor, None] = None,
                mask: Optional[np.ndarray] = None) -> Tensor:
    """Pre-norm residual attention: x + O(attn(Q(ln x), K(kv), V(kv))).

    Position codes join the query/key projections only, so a zero output
    projection leaves the residual stream untouched. They may be tensors
    (learnable level embeddings ride along) or plain arrays.
    """
    h = F.layer_norm(x, p[f"{base}.ln.gamma"], p[f"{base}.ln.beta"])
    kv_in = h if kv is None else kv
    q_in = h if q_pos is None else h + _as_tensor(q_pos)
    k_in = kv_in if k_pos is None else kv_in + _as_tensor(k_pos)
    q = F.linear(q_in, p[f"{base}.q.w"], p[f"{base}.q.b"])
    k = F.linear(k_in, p[f"{base}.k.w"], p[f"{base}.k.b"])
    v = F.linear(kv_in, p[f"{base}.v.w"], p[f"{base}.v.b"])
    a = F.attention(q, k, v, n_heads, mask=mask)
    return x + F.linear(a, p[f"{base}.o.w"], p[f"{base}.o.b"])


def pixel_decode(features: tuple[Tensor, Tensor, Tensor, Tensor], params: ParamStore,
                 cfg: SegHeadConfig) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Enrich backbone maps into (D1, D2, D3, D4) at width c_d, shapes preserved."""
    squeezed = features[0].ndim == 3
    f1, f2, f3, f4 = [f.reshape(1, *f.shape) if squeezed else f for f in features]

    proj = []
    shapes = []
    pos_parts = []
    for lvl, f in zip((2, 3, 4), (f2, f3, f4)):
        d = conv2d(f, params[f"enc.in{lvl}.w"], params[f"enc.in{lvl}.b"])
        h, w = d.shape[-2:]
        shapes.append((h, w))
        proj.append(_tokens(d))
        pos_parts.append(Tensor(sincos_positions(cfg.c_d, h, w))
                         + params[f"enc.level{lvl}"])
    x = concat(proj, axis=1)
    pos = concat(pos_parts, axis=0)

    for r in range(cfg.encoder_rounds):
        x = _attn_block(x, None, params, f"enc.r{r}", cfg.n_heads, q_pos=pos, k_pos=pos)

    sizes = [h * w for h, w in shapes]
    offs = np.cumsum([0] + sizes)
    d2 = _untokens(x[:, offs[0]:offs[1]], *shapes[0])
    d3 = _untokens(x[:, offs[1]:offs[2]], *shapes[1])
    d4 = _untokens(x[:, offs[2]:offs[3]], *shapes[2])
    lateral = conv2d(f1, params["enc.lateral.w"], params["enc.lateral.b"])
    d1 = lateral + bilinear_resize(d2, f1.shape[-2:])

    if squeezed:
        d1, d2, d3, d4 = d1[0], d2[0], d3[0], d4[0]
    return d1, d2, d3, d4


def pixel_embedding(d1: Tensor, params: ParamStore, cfg: SegHeadConfig) -> Tensor:
    """Two stride-2 transposed convs with an activation between, then 1x1 to c_e."""
    x = transposed_conv2d(d1, params["epix.t1.w"], params["epix.t1.b"], stride=2)
    x = relu(x)
    x = transposed_conv2d(x, params["epix.t2.w"], params["epix.t2.b"], stride=2)
    return conv2d(x, params["epix.proj.w"], params["epix.proj.b"])


def _proposal_logits(queries: Tensor, e_pixel: Tensor) -> Tensor:
    """(B, N, C_e) x (B, C_e, H, W) -> (B, N, H, W) mask logits."""
    b, ce, h, w = e_pixel.shape
    flat = e_pixel.reshape(b, ce, h * w)
    return (queries @ flat).reshape(b, queries.shape[1], h, w)


def _attention_mask(m_logits_data: np.ndarray, token_hw: tuple[int, int]) -> np.ndarray:
    """Boolean blocked-position mask (B, 1, N, L) from detached proposal logits."""
    b, n, h, w = m_logits_data.shape
    m = m_logits_data.astype(np.float64)
    # exp only of non-positive values so large logits cannot overflow
    pos = m >= 0
    z = np.exp(np.where(pos, -m, m))
    prob = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    small = resize_array_bilinear(prob.reshape(b * n, h, w), token_hw)
    blocked = (small < 0.5).reshape(b, n, -1)
    return blocked[:, None, :, :]


def decode_queries(q0: Tensor, enc: tuple[Tensor, Tensor, Tensor, Tensor],
                   e_pixel: Tensor, params: ParamStore, cfg: SegHeadConfig,
                   trace: Optional[list] = None,
                   taped_intermediates: bool = False) -> tuple[Tensor, list]:
    """Run the four decoder layers over D4, D3, D2, D1; return final queries.

    Also returns the per-layer proposal mask logits. They are plain detached
    computations unless taped_intermediates is set (deep supervision);
    attention masks are always built from detached values.

    When ``trace`` is a list, one entry per layer records the consumed token
    grid so tests can assert layer count and resolution order.
    """
    squeezed = e_pixel.ndim == 3
    if squeezed:
        enc = tuple(d.reshape(1, *d.shape) for d in enc)
        e_pixel = e_pixel.reshape(1, *e_pixel.shape)
    d1, d2, d3, d4 = enc
    b = e_pixel.shape[0]

    q = q0.reshape(1, *q0.shape) + Tensor(np.zeros((b, 1, 1), dtype=np.float32))
    intermediates = []
    levels = (d4, d3, d2, d1)
    for l in range(cfg.decoder_layers):
        src = levels[l % len(levels)]
        th, tw = src.shape[-2:]
        if taped_intermediates:
            m_l = _proposal_logits(q, e_pixel)
            m_data = m_l.data
            intermediates.append(m_l[0] if squeezed else m_l)
        else:
            qm = np.matmul(q.data, e_pixel.data.reshape(b, cfg.c_e, -1))
            m_data = qm.reshape(b, q.shape[1], *e_pixel.shape[-2:])
            intermediates.append(m_data[0] if squeezed else m_data)
        blocked = _attention_mask(m_data, (th, tw))
        if trace is not None:
            trace.append({"layer": l, "token_hw": (th, tw),
                          "mask_shape": m_data.shape[-3:]})
        tokens = _tokens(src)
        k_pos = sincos_positions(cfg.c_d, th, tw)
        q = _attn_block(q, tokens, params, f"dec.l{l}.cross", cfg.n_heads,
                        k_pos=k_pos, mask=blocked)
        q = _attn_block(q, None, params, f"dec.l{l}.self", cfg.n_heads)
        h = F.layer_norm(q, params[f"dec.l{l}.ffn.ln.gamma"], params[f"dec.l{l}.ffn.ln.beta"])
        h = relu(F.linear(h, params[f"dec.l{l}.ffn.w1"], params[f"dec.l{l}.ffn.b1"]))
        q = q + F.linear(h, params[f"dec.l{l}.ffn.w2"], params[f"dec.l{l}.ffn.b2"])

    q = F.layer_norm(q, params["dec.final_ln.gamma"], params["dec.final_ln.beta"])
    return (q[0] if squeezed else q), intermediates


def predict(q_final: Tensor, e_pixel: Tensor, params: ParamStore,
            cfg: SegHeadConfig, intermediate: Optional[list] = None) -> MaskPrediction:
    """Mask and classification heads on the final queries."""
    squeezed = e_pixel.ndim == 3
    q = q_final.reshape(1, *q_final.shape) if q_final.ndim == 2 else q_final
    e = e_pixel.reshape(1, *e_pixel.shape) if squeezed else e_pixel
    q_mask = F.linear(relu(F.linear(q, params["pred.mask.w1"], params["pred.mask.b1"])),
                      params["pred.mask.w2"], params["pred.mask.b2"])
    m_hat = _proposal_logits(q_mask, e)
    c = F.linear(relu(F.linear(q, params["pred.cls.w1"], params["pred.cls.b1"])),
                 params["pred.cls.w2"], params["pred.cls.b2"])
    c = c.reshape(c.shape[0], c.shape[1])
    if squeezed:
        m_hat, c, e = m_hat[0], c[0], e[0]
    return MaskPrediction(e_pixel=e, m_hat=m_hat, c=c,
                          intermediate=intermediate if intermediate is not None else [])
