"""Acceptance gate: one test per shipped guarantee.

Run with ``pytest -v tests/test_acceptance.py`` to get one pass/fail line per
guarantee. Tests 01-06 and 10 are property checks and finish in seconds; 07-09
run real training loops and together take roughly twenty minutes on one CPU
core. Thresholds that came out of oracle runs are recorded next to the
assertion that uses them.
"""
from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest
from conftest import (REL_TOL_END2END, REL_TOL_PRIMITIVE, assert_grads_close,
                      autodiff_grad, numeric_grad)

import pvseg.tensor as T
from pvseg.backbone import BackboneConfig, extract_features
from pvseg.data.loading import load_image, load_mask
from pvseg.data.manifest import fold_records, parse_manifest
from pvseg.data.synth import SyntheticSceneSpec, generate_synthetic
from pvseg.functional import (attention, bce_with_logits, group_norm, layer_norm,
                              linear, log_softmax, softmax)
from pvseg.metrics import ConfusionCounts, accuracy, confusion, f1, iou
from pvseg.model import ModelConfig, build_model_params, forward
from pvseg.objective import loss as sample_loss
from pvseg.objective import match
from pvseg.ops import bilinear_resize, conv2d, max_pool2d, transposed_conv2d
from pvseg.pretext import (AugmentationSpec, PretextConfig, build_pretext_params,
                           cosine_lambda, ema_update, entropy, make_teacher,
                           pretext_loss, pretrain, student_dist, teacher_dist)
from pvseg.seghead import MaskPrediction, SegHeadConfig
from pvseg.tensor import Tape, Tensor, backward
from pvseg.train import TrainConfig, train

CLI = [sys.executable, "-m", "pvseg.cli"]


# ---------------------------------------------------------------------------
# shared corpora (built once per session)

@pytest.fixture(scope="session")
def corpus64(tmp_path_factory):
    """64 unlabeled-use scenes for the pretraining checks."""
    out = str(tmp_path_factory.mktemp("acc") / "corpus64")
    generate_synthetic(SyntheticSceneSpec(), seed=7, n=64, out_dir=out)
    records = parse_manifest(os.path.join(out, "manifest.tsv"))
    return [load_image(r.image_path) for r in records]


@pytest.fixture(scope="session")
def corpus256(tmp_path_factory):
    """256 labeled scenes; returns (train_pairs, val_pairs)."""
    out = str(tmp_path_factory.mktemp("acc") / "corpus256")
    generate_synthetic(SyntheticSceneSpec(), seed=11, n=256, out_dir=out)
    records = parse_manifest(os.path.join(out, "manifest.tsv"))

    def pairs(fold):
        return [(load_image(r.image_path), load_mask(r.mask_path))
                for r in fold_records(records, fold)]

    return pairs("train"), pairs("val")


def _tiny_model():
    return ModelConfig(
        backbone=BackboneConfig(stage_channels=(8, 16, 32, 64)),
        head=SegHeadConfig(n_queries=4, c_e=16, c_d=32, n_heads=2,
                           encoder_rounds=2, ffn_hidden=32, decoder_layers=4))


# ---------------------------------------------------------------------------
# 01: every differentiable primitive and the whole image->loss path agree
#     with central finite differences in float64

def test_01_gradient_suite():
    rng = np.random.default_rng(0)

    def away_from(x, gap):
        return np.sign(x) * (np.abs(x) + gap)

    w_a = rng.standard_normal((3, 4))      # weights that break sum-to-one
    w_b = rng.standard_normal((2, 8, 4))   # invariances in softmax outputs
    x34 = rng.standard_normal((3, 4))
    y34 = rng.standard_normal((3, 4))
    pos = 0.5 + rng.random((3, 4))
    targets = (rng.random((3, 4)) > 0.6).astype(np.float64)
    pool_in = rng.permutation(2 * 36).astype(np.float64).reshape(1, 2, 6, 6)
    pool_in += rng.random(pool_in.shape) * 0.01

    def np_softmax(x, tau=1.0, axis=-1):
        z = x / tau
        z = z - z.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)

    def np_layer_norm(x, g, b, eps=1e-5):
        m = x.mean(-1, keepdims=True)
        v = x.var(-1, keepdims=True)
        return g * (x - m) / np.sqrt(v + eps) + b

    def np_group_norm(x, g, b, groups, eps=1e-5):
        n, c, h, w = x.shape
        r = x.reshape(n, groups, c // groups, h, w)
        m = r.mean((2, 3, 4), keepdims=True)
        v = r.var((2, 3, 4), keepdims=True)
        out = ((r - m) / np.sqrt(v + eps)).reshape(n, c, h, w)
        return out * g.reshape(1, c, 1, 1) + b.reshape(1, c, 1, 1)

    def np_bce(z, t):
        return (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()

    def np_attention(q, k, v, n_heads):
        lq, d = q.shape[-2:]
        lk = k.shape[-2]
        dh = d // n_heads
        qh = q.reshape(lq, n_heads, dh).transpose(1, 0, 2)
        kh = k.reshape(lk, n_heads, dh).transpose(1, 0, 2)
        vh = v.reshape(lk, n_heads, dh).transpose(1, 0, 2)
        att = np_softmax(qh @ kh.transpose(0, 2, 1) / np.sqrt(dh))
        return (att @ vh).transpose(1, 0, 2).reshape(lq, d)

    def np_conv(x, w, b, stride, padding):
        n, cin, h, wd = x.shape
        cout, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        oh = (h + 2 * padding - kh) // stride + 1
        ow = (wd + 2 * padding - kw) // stride + 1
        out = np.zeros((n, cout, oh, ow))
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[:, :, i, j] = np.einsum("ncij,ocij->no", patch, w) + b
        return out

    def np_tconv(x, w, b, stride):
        n, cin, h, wd = x.shape
        _, cout, kh, kw = w.shape
        out = np.zeros((n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw))
        for i in range(h):
            for j in range(wd):
                out[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += \
                    np.einsum("nc,coij->noij", x[:, :, i, j], w)
        return out + b.reshape(1, cout, 1, 1)

    def np_resize(x, out_hw):
        c, h, w = x.shape
        oh, ow = out_hw
        rows = (np.arange(oh) + 0.5) * h / oh - 0.5
        cols = (np.arange(ow) + 0.5) * w / ow - 0.5
        r0 = np.clip(np.floor(rows).astype(int), 0, h - 1)
        c0 = np.clip(np.floor(cols).astype(int), 0, w - 1)
        r1 = np.clip(r0 + 1, 0, h - 1)
        c1 = np.clip(c0 + 1, 0, w - 1)
        fr = np.clip(rows - r0, 0.0, 1.0)[:, None]
        fc = np.clip(cols - c0, 0.0, 1.0)[None, :]
        top = x[:, r0][:, :, c0] * (1 - fc) + x[:, r0][:, :, c1] * fc
        bot = x[:, r1][:, :, c0] * (1 - fc) + x[:, r1][:, :, c1] * fc
        return top * (1 - fr) + bot * fr

    checks = [
        ("add", lambda a, b: (T.add(a, b) * Tensor(w_a)).sum(),
         lambda a, b: ((a + b) * w_a).sum(), [x34, y34]),
        ("sub", lambda a, b: (T.sub(a, b) * Tensor(w_a)).sum(),
         lambda a, b: ((a - b) * w_a).sum(), [x34, y34]),
        ("mul", lambda a, b: T.mul(a, b).sum(), lambda a, b: (a * b).sum(), [x34, y34]),
        ("div", lambda a, b: T.div(a, b).sum(), lambda a, b: (a / b).sum(),
         [x34, away_from(y34, 0.5)]),
        ("neg", lambda a: (T.neg(a) * Tensor(w_a)).sum(),
         lambda a: (-a * w_a).sum(), [x34]),
        ("exp", lambda a: T.exp(a).sum(), lambda a: np.exp(a).sum(), [x34]),
        ("log", lambda a: T.log(a).sum(), lambda a: np.log(a).sum(), [pos]),
        ("sqrt", lambda a: T.sqrt(a).sum(), lambda a: np.sqrt(a).sum(), [pos]),
        ("relu", lambda a: T.relu(a).sum(),
         lambda a: np.maximum(a, 0).sum(), [away_from(x34, 0.1)]),
        ("sigmoid", lambda a: T.sigmoid(a).sum(),
         lambda a: (1 / (1 + np.exp(-a))).sum(), [x34]),
        ("softplus", lambda a: T.softplus(a).sum(),
         lambda a: np.logaddexp(0, a).sum(), [x34]),
        ("clip_min", lambda a: T.clip_min(a, 0.0).sum(),
         lambda a: np.maximum(a, 0.0).sum(), [away_from(x34, 0.1)]),
        ("sum_axis", lambda a: (T.sum_(a, axis=0) * Tensor(w_a[0])).sum(),
         lambda a: (a.sum(axis=0) * w_a[0]).sum(), [x34]),
        ("mean", lambda a: (T.mean(a, axis=1, keepdims=True) * 3.0).sum(),
         lambda a: (a.mean(axis=1, keepdims=True) * 3.0).sum(), [x34]),
        ("reshape", lambda a: (T.reshape(a, (4, 3)) * Tensor(w_a.reshape(4, 3))).sum(),
         lambda a: (a.reshape(4, 3) * w_a.reshape(4, 3)).sum(), [x34]),
        ("transpose", lambda a: (T.transpose(a) * Tensor(w_a.T)).sum(),
         lambda a: (a.T * w_a.T).sum(), [x34]),
        ("getitem", lambda a: T.getitem(a, (slice(1, 3), slice(None, None, 2))).sum(),
         lambda a: a[1:3, ::2].sum(), [x34]),
        ("concat", lambda a, b: (lambda t: (t * t).sum())(T.concat([a, b], axis=1)),
         lambda a, b: (np.concatenate([a, b], axis=1) ** 2).sum(), [x34, y34]),
        ("matmul", lambda a, b: T.matmul(a, b).sum(),
         lambda a, b: (a @ b).sum(), [rng.standard_normal((3, 5)),
                                      rng.standard_normal((5, 4))]),
        ("conv2d", lambda x, w, b: conv2d(x, w, b, stride=2, padding=1).sum(),
         lambda x, w, b: np_conv(x, w, b, 2, 1).sum(),
         [rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)),
          rng.standard_normal(3)]),
        ("transposed_conv2d", lambda x, w, b: transposed_conv2d(x, w, b, stride=2).sum(),
         lambda x, w, b: np_tconv(x, w, b, 2).sum(),
         [rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((3, 2, 2, 2)),
          rng.standard_normal(2)]),
        ("max_pool2d", lambda x: max_pool2d(x, k=3, stride=2, padding=1).sum(),
         lambda x: np.stack([np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)),
                                    constant_values=-np.inf)
                             [:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3].max((2, 3))
                             for i in range(3) for j in range(3)]).sum(),
         [pool_in]),
        ("bilinear_resize_up", lambda x: (lambda t: (t * t).sum())(bilinear_resize(x, (8, 8))),
         lambda x: (np_resize(x, (8, 8)) ** 2).sum(),
         [rng.standard_normal((2, 5, 5))]),
        ("bilinear_resize_down", lambda x: (lambda t: (t * t).sum())(bilinear_resize(x, (3, 3))),
         lambda x: (np_resize(x, (3, 3)) ** 2).sum(),
         [rng.standard_normal((2, 5, 5))]),
        ("softmax", lambda x: (softmax(x, tau=0.7) * Tensor(w_b)).sum(),
         lambda x: (np_softmax(x, 0.7) * w_b).sum(),
         [rng.standard_normal((2, 8, 4))]),
        ("log_softmax", lambda x: (log_softmax(x, tau=0.7) * Tensor(w_b)).sum(),
         lambda x: (np.log(np_softmax(x, 0.7)) * w_b).sum(),
         [rng.standard_normal((2, 8, 4))]),
        ("layer_norm", lambda x, g, b: (layer_norm(x, g, b) * Tensor(w_a)).sum(),
         lambda x, g, b: (np_layer_norm(x, g, b) * w_a).sum(),
         [x34, 1.0 + 0.1 * rng.standard_normal(4), 0.1 * rng.standard_normal(4)]),
        ("group_norm", lambda x, g, b: (lambda t: (t * t).sum())(group_norm(x, g, b, groups=4)),
         lambda x, g, b: (np_group_norm(x, g, b, 4) ** 2).sum(),
         [rng.standard_normal((2, 8, 3, 3)), 1.0 + 0.1 * rng.standard_normal(8),
          0.1 * rng.standard_normal(8)]),
        ("linear", lambda x, w, b: (lambda t: (t * t).sum())(linear(x, w, b)),
         lambda x, w, b: ((x @ w.T + b) ** 2).sum(),
         [rng.standard_normal((4, 5)), rng.standard_normal((3, 5)),
          rng.standard_normal(3)]),
        ("bce_with_logits", lambda z: bce_with_logits(z, targets),
         lambda z: np_bce(z, targets), [x34]),
        ("attention", lambda q, k, v: (lambda t: (t * t).sum())(attention(q, k, v, n_heads=2)),
         lambda q, k, v: (np_attention(q, k, v, 2) ** 2).sum(),
         [rng.standard_normal((4, 8)), rng.standard_normal((5, 8)),
          rng.standard_normal((5, 8))]),
    ]
    for name, build, fn, arrays in checks:
        try:
            assert_grads_close(build, fn, arrays, rel_tol=REL_TOL_PRIMITIVE)
        except AssertionError as e:
            raise AssertionError(f"primitive {name}: {e}") from None

    # end to end: image -> features -> queries -> matched segmentation loss,
    # checked as directional derivatives over all parameters plus the image
    cfg = _tiny_model()
    params = build_model_params(np.random.default_rng(7), cfg)
    for t in params.tensors():
        t.data = t.data.astype(np.float64)
    # widen the margin between proposal logits and the attention-mask
    # threshold so the finite-difference step cannot flip a mask bit
    params["dec.q0"].data *= 50.0
    image = Tensor(np.random.default_rng(11).random((3, 32, 32)), requires_grad=True)
    gt = np.zeros((32, 32), dtype=np.float64)
    gt[8:20, 10:22] = 1.0

    def loss_value():
        return sample_loss(forward(image, params, cfg), gt).data.item()

    with Tape() as tape:
        out = sample_loss(forward(image, params, cfg), gt)
    backward(out, tape, params=params.tensors() + [image])

    dir_rng = np.random.default_rng(23)
    tensors = params.tensors() + [image]
    for trial in range(2):
        vs = [dir_rng.standard_normal(t.shape) for t in tensors]
        norm = np.sqrt(sum((v ** 2).sum() for v in vs))
        vs = [v / norm for v in vs]
        want = sum((t.grad * v).sum() for t, v in zip(tensors, vs))
        eps = 1e-6
        for t, v in zip(tensors, vs):
            t.data += eps * v
        hi = loss_value()
        for t, v in zip(tensors, vs):
            t.data -= 2 * eps * v
        lo = loss_value()
        for t, v in zip(tensors, vs):
            t.data += eps * v
        fd = (hi - lo) / (2 * eps)
        rel = abs(fd - want) / max(abs(fd), abs(want), 1e-10)
        assert rel <= REL_TOL_END2END, \
            f"end-to-end trial {trial}: fd={fd:.8e} grad.v={want:.8e} rel={rel:.2e}"


# ---------------------------------------------------------------------------
# 02: output distributions normalize, the teacher is gradient-free, and
#     cross-entropy against any target is bounded below by its entropy

def test_02_distribution_suite():
    cfg = PretextConfig(k=32, hidden=32,
                        backbone=BackboneConfig(stage_channels=(8, 16, 32, 64)))
    params = build_pretext_params(np.random.default_rng(0), cfg)
    teacher = make_teacher(params, cfg)
    teacher.center = (0.1 * np.random.default_rng(1).standard_normal(cfg.k)
                      ).astype(np.float32)

    rng = np.random.default_rng(2)
    for _ in range(4):
        x = Tensor(rng.random((25, 3, 32, 32), dtype=np.float32))
        p_s = student_dist(x, params, cfg).data
        p_t = teacher_dist(x, teacher, cfg).data
        np.testing.assert_allclose(p_s.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(p_t.sum(axis=-1), 1.0, atol=1e-6)
        assert (p_s >= 0).all() and (p_t >= 0).all()

    x = Tensor(rng.random((4, 3, 32, 32), dtype=np.float32))
    with Tape() as tape:
        p_t = teacher_dist(x, teacher, cfg)
        p_s = student_dist(x, params, cfg)
        loss = pretext_loss(p_t, p_s)
    teacher_tensors = teacher.params.tensors()
    backward(loss, tape, params=params.tensors() + teacher_tensors)
    assert all(t.grad is None or not np.any(t.grad) for t in teacher_tensors), \
        "teacher parameters received gradient"
    assert any(np.any(t.grad != 0.0) for t in params.tensors()), \
        "student parameters received no gradient"

    gibbs_rng = np.random.default_rng(3)
    for k in (2, 16, 256):
        for _ in range(334):
            p = gibbs_rng.dirichlet(np.full(k, 0.3))
            q = gibbs_rng.dirichlet(np.full(k, 0.3))
            ce = pretext_loss(Tensor(p), Tensor(q)).data.item()
            assert ce >= entropy(p) - 1e-12, f"k={k}: CE {ce} < entropy {entropy(p)}"


# ---------------------------------------------------------------------------
# 03: teacher-decay schedule anchors and the EMA contraction property

def test_03_ema_and_schedule():
    assert cosine_lambda(0, 1000) == pytest.approx(0.996, abs=1e-9)
    assert cosine_lambda(500, 1000) == pytest.approx(0.998, abs=1e-9)
    assert cosine_lambda(1000, 1000) == pytest.approx(1.0, abs=1e-9)

    cfg = PretextConfig(k=16, hidden=16,
                        backbone=BackboneConfig(stage_channels=(8, 16, 32, 64)))
    for seed, lam in ((0, 0.5), (1, 0.9), (2, 0.996)):
        student = build_pretext_params(np.random.default_rng(seed), cfg)
        teacher = make_teacher(build_pretext_params(np.random.default_rng(seed + 10), cfg), cfg)
        gaps = {n: teacher.params[n].data - s.data for n, s in student.items()}
        ema_update(teacher, student, lam)
        for n, s in student.items():
            np.testing.assert_allclose(teacher.params[n].data - s.data,
                                       lam * gaps[n], rtol=1e-5, atol=1e-7)


# ---------------------------------------------------------------------------
# 04: confusion counts and the derived rates agree with a per-pixel loop

def test_04_metrics_oracle():
    def loop_confusion(pred, gt):
        tp = tn = fp = fn = 0
        for r in range(pred.shape[0]):
            for c in range(pred.shape[1]):
                p, g = bool(pred[r, c]), bool(gt[r, c])
                tp += p and g
                tn += (not p) and (not g)
                fp += p and not g
                fn += (not p) and g
        return tp, tn, fp, fn

    rng = np.random.default_rng(0)
    for _ in range(200):
        pred = rng.random((16, 16)) > rng.uniform(0.2, 0.8)
        gt = rng.random((16, 16)) > rng.uniform(0.2, 0.8)
        got = confusion(pred, gt)
        tp, tn, fp, fn = loop_confusion(pred, gt)
        assert (got.tp, got.tn, got.fp, got.fn) == (tp, tn, fp, fn)
        denom_iou = tp + fp + fn
        if denom_iou:
            assert iou(got) == pytest.approx(tp / denom_iou, rel=1e-12)
        assert accuracy(got) == pytest.approx((tp + tn) / 256, rel=1e-12)
        if 2 * tp + fp + fn:
            assert f1(got) == pytest.approx(2 * tp / (2 * tp + fp + fn), rel=1e-12)

    assert f1(ConfusionCounts(tp=3, fp=1, fn=1)) == pytest.approx(0.75, rel=1e-12)
    assert iou(ConfusionCounts(tp=3, fp=1, fn=2)) == pytest.approx(0.5, rel=1e-12)


# ---------------------------------------------------------------------------
# 05: feature/embedding/mask shapes and the decoder's coarse-to-fine pass

def test_05_shape_contracts():
    cfg = ModelConfig()  # the defaults we ship
    params = build_model_params(np.random.default_rng(0), cfg)
    x = Tensor(np.random.default_rng(1).random((3, 64, 64), dtype=np.float32))

    feats = extract_features(x, params, cfg.backbone)
    assert [f.shape[-2:] for f in feats] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert [f.shape[0] for f in feats] == list(cfg.backbone.stage_channels)

    trace = []
    pred = forward(x, params, cfg, trace=trace)
    n = cfg.head.n_queries
    assert pred.e_pixel.shape == (cfg.head.c_e, 64, 64)
    assert pred.m_hat.shape == (n, 64, 64)
    assert pred.c.shape == (n,)
    assert len(pred.intermediate) == 4
    assert all(m.shape == (n, 64, 64) for m in pred.intermediate)
    # exactly four decoder layers, consuming the pyramid coarse to fine
    assert [t["token_hw"] for t in trace] == [(2, 2), (4, 4), (8, 8), (16, 16)]

    batched = forward(Tensor(np.random.default_rng(2).random((2, 3, 64, 64),
                                                             dtype=np.float32)),
                      params, cfg)
    assert batched.m_hat.shape == (2, n, 64, 64)
    assert batched.c.shape == (2, n)


# ---------------------------------------------------------------------------
# 06: query matching equals exhaustive cost enumeration; ties are stable

def test_06_matching_oracle():
    def oracle(c_logits, m_logits, gt):
        best_i, best_cost = -1, np.inf
        for i in range(c_logits.shape[0]):
            pc = min(max(1.0 / (1.0 + np.exp(-float(c_logits[i]))), 1e-7), 1 - 1e-7)
            cost = -np.log(pc)
            acc = 0.0
            h, w = gt.shape
            for r in range(h):
                for col in range(w):
                    pm = 1.0 / (1.0 + np.exp(-float(m_logits[i, r, col])))
                    pm = min(max(pm, 1e-7), 1 - 1e-7)
                    t = float(gt[r, col])
                    acc -= t * np.log(pm) + (1 - t) * np.log(1 - pm)
            cost += acc / (h * w)
            if cost < best_cost:
                best_cost, best_i = cost, i
        return best_i

    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(1, 9))
        c = rng.standard_normal(n).astype(np.float32) * 2
        m = rng.standard_normal((n, 8, 8)).astype(np.float32) * 3
        gt = np.zeros((8, 8), dtype=np.float32)
        gt[tuple(rng.integers(0, 5, size=2))] = 1.0
        gt[2:5, 1:4] = (rng.random((3, 3)) > 0.5).astype(np.float32)
        pred = MaskPrediction(e_pixel=Tensor(np.zeros((1, 8, 8), dtype=np.float32)),
                              m_hat=Tensor(m), c=Tensor(c), intermediate=[])
        got = match(pred, gt)
        want = oracle(c, m, gt)
        assert got == want, f"trial {trial}: match {got} != oracle {want}"
        assert match(pred, gt) == got  # same inputs, same winner

    # exact duplicate of the cheapest query: the lower index must win
    c = np.array([0.3, 0.3, -2.0], dtype=np.float32)
    m = np.stack([np.full((8, 8), 2.0), np.full((8, 8), 2.0),
                  np.full((8, 8), -5.0)]).astype(np.float32)
    gt = np.ones((8, 8), dtype=np.float32)
    pred = MaskPrediction(e_pixel=Tensor(np.zeros((1, 8, 8), dtype=np.float32)),
                          m_hat=Tensor(m), c=Tensor(c), intermediate=[])
    assert match(pred, gt) == 0


# ---------------------------------------------------------------------------
# 07: 200 pretraining steps on 64 scenes learn (running loss drops to 0.8x)
#     without collapsing (teacher usage entropy stays above half its maximum)

# Settings for the short-run check, recorded from the oracle runs that fixed
# them (they pass with margin across seeds 0-5 on two different corpora).
# Prototype count and head width are sized to the 64-image corpus; learning
# rate and head gain are scaled to the 200-step horizon; the teacher
# temperature is one notch softer than the long-run default. Decay floor and
# centering momentum are the shipped defaults.
SMOKE_PRETEXT = dict(steps=200, batch_size=8, seed=0, k=16, hidden=64,
                     lr=1e-2, head_init_gain=0.01, tau_t=0.06)


def test_07_pretraining_smoke(corpus64):
    cfg = PretextConfig(**SMOKE_PRETEXT)
    rows = []
    pretrain(corpus64, cfg, log_rows=rows)
    losses = np.array([r[1] for r in rows])
    usage = np.array([r[3] for r in rows])
    window = 20
    initial = losses[:window].mean()
    final = losses[-window:].mean()
    floor = 0.5 * np.log(cfg.k)
    assert final <= 0.8 * initial, \
        f"running loss {initial:.3f} -> {final:.3f}, ratio {final / initial:.3f} > 0.8"
    assert usage.min() >= floor, \
        f"teacher usage entropy dipped to {usage.min():.3f} < {floor:.3f}"


# ---------------------------------------------------------------------------
# 08: ~2000 supervised steps from random init reach micro val IoU >= 0.70

def test_08_segmentation_smoke(corpus256):
    train_pairs, val_pairs = corpus256
    rows = []
    train(train_pairs, val_pairs, TrainConfig(seed=0), log_rows=rows)
    final_iou = [r[2] for r in rows if r[2] is not None][-1]
    assert final_iou >= 0.70, f"val IoU {final_iou:.4f} < 0.70 after 2000 steps"


# ---------------------------------------------------------------------------
# 09: with a fixed 500-step budget, pretrained backbones do no harm, and
#     pretraining with all augmentations beats pretraining with none

def test_09_pretraining_benefit(corpus64, corpus256):
    train_pairs, val_pairs = corpus256

    def pretrain_arrays(augmentations):
        cfg = PretextConfig(**{**SMOKE_PRETEXT, "augmentations": augmentations})
        _, student = pretrain(corpus64, cfg)
        return dict(student.arrays())

    def downstream(seed, init_arrays=None):
        rows = []
        cfg = TrainConfig(steps=500, eval_every=500, seed=seed)
        train(train_pairs, val_pairs, cfg, init_arrays=init_arrays, log_rows=rows)
        return [r[2] for r in rows if r[2] is not None][-1]

    all_augs = pretrain_arrays(AugmentationSpec())
    no_augs = pretrain_arrays(AugmentationSpec.disabled())

    seeds = (0, 1, 2)
    random_iou = np.array([downstream(s) for s in seeds])
    pre_iou = np.array([downstream(s, all_augs) for s in seeds])
    noaug_iou = np.array([downstream(s, no_augs) for s in seeds])

    assert pre_iou.mean() >= random_iou.mean() - 0.01, \
        f"pretrained {pre_iou.mean():.4f} vs random {random_iou.mean():.4f}"
    assert pre_iou.mean() >= noaug_iou.mean() - 0.01, \
        f"all augmentations {pre_iou.mean():.4f} vs none {noaug_iou.mean():.4f}"


# ---------------------------------------------------------------------------
# 10: one thread, one seed -> bit-identical logs and checkpoints twice over

DET_CFG = """
seed = 5
backbone.stage_channels = 8,16,32,64
pretext.steps = 10
pretext.k = 16
pretext.hidden = 16
model.n_queries = 4
model.c_e = 16
model.c_d = 32
model.heads = 2
model.encoder_rounds = 2
model.ffn_hidden = 32
model.decoder_layers = 2
train.steps = 10
train.batch_size = 2
train.eval_every = 5
"""


def test_10_determinism(tmp_path):
    def run(args):
        r = subprocess.run(CLI + args, capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        return r

    cfg = tmp_path / "run.cfg"
    cfg.write_text(DET_CFG)
    scene = tmp_path / "scene.cfg"
    scene.write_text("# defaults\n")
    corpus = tmp_path / "corpus"
    run(["gen-data", "--spec", str(scene), "--out", str(corpus), "--n", "12",
         "--seed", "1"])
    manifest = corpus / "manifest.tsv"

    outputs = {}
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        run(["pretrain", "--threads", "1", "--data", str(manifest),
             "--config", str(cfg), "--out", str(d / "teacher.ckpt"),
             "--log", str(d / "pre.csv")])
        run(["train", "--threads", "1", "--data", str(manifest),
             "--config", str(cfg), "--out", str(d / "model.ckpt"),
             "--log", str(d / "train.csv")])
        outputs[tag] = {p.name: p.read_bytes() for p in d.iterdir()}

    assert outputs["a"].keys() == outputs["b"].keys()
    for name in outputs["a"]:
        assert outputs["a"][name] == outputs["b"][name], f"{name} differs between runs"
    assert len(outputs["a"]["train.csv"].splitlines()) == 10
