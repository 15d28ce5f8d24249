"""Self-distillation pieces: augmentation, distributions, loss, EMA, schedule."""
import numpy as np
import pytest

from pvseg.backbone import BackboneConfig
from pvseg.data.checkpoint import load_checkpoint
from pvseg.errors import DataError
from pvseg.pretext import (AugmentationSpec, PretextConfig, augment, build_pretext_params,
                           center_update, cosine_lambda, ema_update, entropy, make_teacher,
                           usage_entropy,
                           pretext_loss, pretrain, student_dist, teacher_dist,
                           teacher_logits)
from pvseg.tensor import Tape, Tensor, backward


def _tiny_cfg(**kw):
    base = dict(steps=3, batch_size=2, k=16, hidden=8, seed=0,
                backbone=BackboneConfig(stage_channels=(8, 16, 32, 64)))
    base.update(kw)
    return PretextConfig(**base)


def _images(rng, n=5, side=32):
    return [rng.random((3, side, side), dtype=np.float32) for _ in range(n)]


def _rand_dist(rng, k):
    z = rng.standard_normal(k)
    e = np.exp(z - z.max())
    return e / e.sum()


class TestAugment:
    def _identity_spec(self):
        return AugmentationSpec(jitter_range=(1.0, 1.0), crop_area=(1.0, 1.0),
                                noise_sigma=0.0, hflip=False)

    def test_disabled_spec_is_identity(self, rng):
        img = rng.random((3, 16, 16), dtype=np.float32)
        out = augment(img, AugmentationSpec.disabled(), rng)
        np.testing.assert_array_equal(out, img)

    def test_degenerate_parameters_are_identity(self, rng):
        img = rng.random((3, 16, 16), dtype=np.float32)
        out = augment(img, self._identity_spec(), rng)
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_certain_hflip_mirrors_columns(self, rng):
        img = rng.random((3, 8, 8), dtype=np.float32)
        spec = self._identity_spec()
        spec.hflip, spec.hflip_prob = True, 1.0
        out = augment(img, spec, rng)
        np.testing.assert_allclose(out, img[:, :, ::-1], atol=1e-6)
        np.testing.assert_allclose(augment(out, spec, rng), img, atol=1e-6)

    def test_output_shape_range_dtype(self, rng):
        img = rng.random((3, 24, 40), dtype=np.float32)
        for _ in range(20):
            out = augment(img, AugmentationSpec(), rng)
            assert out.shape == img.shape
            assert out.dtype == np.float32
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_views_differ(self, rng):
        img = rng.random((3, 16, 16), dtype=np.float32)
        a = augment(img, AugmentationSpec(), rng)
        b = augment(img, AugmentationSpec(), rng)
        assert not np.array_equal(a, b)


class TestDistributions:
    def test_student_rows_sum_to_one(self, rng):
        cfg = _tiny_cfg()
        params = build_pretext_params(np.random.default_rng(0), cfg)
        x = Tensor(rng.random((4, 3, 32, 32), dtype=np.float32))
        p = student_dist(x, params, cfg).data
        assert p.shape == (4, cfg.k)
        assert (p > 0).all()
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-5)

    def test_teacher_rows_sum_to_one_over_many_inputs(self, rng):
        cfg = _tiny_cfg()
        params = build_pretext_params(np.random.default_rng(0), cfg)
        teacher = make_teacher(params, cfg)
        for _ in range(25):
            x = Tensor(rng.random((4, 3, 32, 32), dtype=np.float32))
            p = teacher_dist(x, teacher, cfg).data
            assert (p > 0).all()
            np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-5)

    def test_teacher_leaves_tape_untouched(self, rng):
        cfg = _tiny_cfg()
        params = build_pretext_params(np.random.default_rng(0), cfg)
        teacher = make_teacher(params, cfg)
        x = Tensor(rng.random((2, 3, 32, 32), dtype=np.float32))
        with Tape() as tape:
            teacher_dist(x, teacher, cfg)
            assert len(tape.nodes) == 0

    def test_centering_matches_hand_softmax(self, rng):
        cfg = _tiny_cfg()
        params = build_pretext_params(np.random.default_rng(0), cfg)
        teacher = make_teacher(params, cfg)
        teacher.center = rng.standard_normal(cfg.k).astype(np.float32)
        x = Tensor(rng.random((2, 3, 32, 32), dtype=np.float32))
        logits = teacher_logits(x, teacher, cfg)
        z = (logits - teacher.center) / cfg.tau_t
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        want = e / e.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(teacher_dist(x, teacher, cfg).data, want,
                                   rtol=1e-4, atol=1e-6)

    def test_nonpositive_temperatures_rejected(self, rng):
        cfg = _tiny_cfg()
        params = build_pretext_params(np.random.default_rng(0), cfg)
        teacher = make_teacher(params, cfg)
        x = Tensor(rng.random((1, 3, 32, 32), dtype=np.float32))
        with pytest.raises(ValueError):
            student_dist(x, params, _tiny_cfg(tau_s=0.0))
        with pytest.raises(ValueError):
            teacher_dist(x, teacher, _tiny_cfg(tau_t=-1.0))


class TestLossAndEntropy:
    def test_one_hot_target_closed_form(self):
        p_t = Tensor(np.array([1.0, 0.0]))
        p_s = Tensor(np.array([0.75, 0.25]))
        got = pretext_loss(p_t, p_s).data.item()
        np.testing.assert_allclose(got, -np.log(0.75), rtol=1e-12)

    def test_uniform_pair_gives_log_k(self):
        k = 32
        u = Tensor(np.full(k, 1.0 / k))
        np.testing.assert_allclose(pretext_loss(u, u).data.item(), np.log(k), rtol=1e-12)

    def test_cross_entropy_dominates_entropy(self, rng):
        for _ in range(1000):
            k = int(rng.integers(2, 17))
            p = _rand_dist(rng, k)
            q = _rand_dist(rng, k)
            ce = pretext_loss(Tensor(p), Tensor(q)).data.item()
            assert ce >= entropy(p) - 1e-12
        p = _rand_dist(rng, 8)
        ce_self = pretext_loss(Tensor(p), Tensor(p)).data.item()
        np.testing.assert_allclose(ce_self, entropy(p), rtol=1e-9)

    def test_batch_is_mean_of_rows(self, rng):
        p = np.stack([_rand_dist(rng, 8) for _ in range(4)])
        q = np.stack([_rand_dist(rng, 8) for _ in range(4)])
        whole = pretext_loss(Tensor(p), Tensor(q)).data.item()
        rows = [pretext_loss(Tensor(p[i]), Tensor(q[i])).data.item() for i in range(4)]
        np.testing.assert_allclose(whole, np.mean(rows), rtol=1e-9)

    def test_saturated_student_stays_finite(self):
        p_t = Tensor(np.array([0.5, 0.5]))
        p_s = Tensor(np.array([1.0, 0.0]))
        assert np.isfinite(pretext_loss(p_t, p_s).data.item())

    def test_target_carries_no_gradient(self, rng):
        p = Tensor(np.array([0.4, 0.6]), requires_grad=True)
        with Tape() as tape:
            loss = pretext_loss(p, p)  # same tensor as target and input
        backward(loss, tape, params=[p])
        # d/dp of -sum(const * log p) at const = p is -1 per coordinate.
        np.testing.assert_allclose(p.grad, [-1.0, -1.0], rtol=1e-6)

    def test_entropy_known_values(self):
        assert entropy(np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-10)
        assert entropy(np.full(256, 1 / 256)) == pytest.approx(np.log(256), rel=1e-9)

    def test_usage_entropy_ignores_row_sharpness(self):
        # Every row is one-hot, but usage is split evenly: the mean
        # distribution is uniform, so usage entropy hits log K while the
        # per-row entropy is zero.
        spread = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert usage_entropy(spread) == pytest.approx(np.log(2), rel=1e-9)
        assert entropy(spread) == pytest.approx(0.0, abs=1e-10)

    def test_usage_entropy_detects_single_class(self):
        stuck = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (8, 1))
        assert usage_entropy(stuck) == pytest.approx(0.0, abs=1e-10)

    def test_usage_entropy_of_single_row_matches_entropy(self, rng):
        p = rng.dirichlet(np.ones(16))
        assert usage_entropy(p) == pytest.approx(entropy(p), rel=1e-12)


class TestSchedule:
    def test_anchor_points(self):
        assert cosine_lambda(0, 1000) == pytest.approx(0.996, abs=1e-9)
        assert cosine_lambda(500, 1000) == pytest.approx(0.998, abs=1e-9)
        assert cosine_lambda(1000, 1000) == pytest.approx(1.0, abs=1e-9)

    def test_monotone_nondecreasing(self):
        vals = [cosine_lambda(s, 200) for s in range(201)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert all(0.996 <= v <= 1.0 for v in vals)

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            cosine_lambda(-1, 100)

    def test_past_end_clamps_to_one(self):
        assert cosine_lambda(150, 100) == 1.0
        assert cosine_lambda(0, 0) == 1.0


class TestEmaAndCenter:
    def test_contraction_by_lambda(self, rng):
        cfg = _tiny_cfg()
        student = build_pretext_params(np.random.default_rng(1), cfg)
        teacher = make_teacher(build_pretext_params(np.random.default_rng(2), cfg), cfg)
        lam = 0.9
        gaps = {n: teacher.params[n].data - s.data for n, s in student.items()}
        ema_update(teacher, student, lam)
        for n, s in student.items():
            np.testing.assert_allclose(teacher.params[n].data - s.data, lam * gaps[n],
                                       rtol=1e-5, atol=1e-7)

    def test_lambda_one_freezes_teacher(self, rng):
        cfg = _tiny_cfg()
        student = build_pretext_params(np.random.default_rng(1), cfg)
        teacher = make_teacher(build_pretext_params(np.random.default_rng(2), cfg), cfg)
        before = {n: t.data.copy() for n, t in teacher.params.items()}
        ema_update(teacher, student, 1.0)
        for n, t in teacher.params.items():
            np.testing.assert_array_equal(t.data, before[n])

    def test_lambda_zero_copies_student(self, rng):
        cfg = _tiny_cfg()
        student = build_pretext_params(np.random.default_rng(1), cfg)
        teacher = make_teacher(build_pretext_params(np.random.default_rng(2), cfg), cfg)
        ema_update(teacher, student, 0.0)
        for n, s in student.items():
            np.testing.assert_allclose(teacher.params[n].data, s.data, atol=1e-7)

    def test_center_converges_geometrically(self, rng):
        target = rng.standard_normal(8).astype(np.float32)
        batch = np.tile(target, (4, 1))
        center = np.zeros(8, dtype=np.float32)
        m = 0.9
        for n in range(1, 30):
            center = center_update(center, batch, momentum=m)
            np.testing.assert_allclose(center, (1 - m ** n) * target, atol=1e-5)

    def test_center_update_uses_batch_mean(self, rng):
        batch = rng.standard_normal((6, 8)).astype(np.float32)
        got = center_update(np.zeros(8, dtype=np.float32), batch, momentum=0.5)
        np.testing.assert_allclose(got, 0.5 * batch.mean(axis=0), rtol=1e-6)

    def test_bad_momentum_rejected(self):
        with pytest.raises(ValueError):
            center_update(np.zeros(4), np.zeros((2, 4)), momentum=1.0)


class TestPretrainLoop:
    def test_smoke_run_logs_and_checkpoints(self, tmp_path, rng):
        cfg = _tiny_cfg()
        rows = []
        path = str(tmp_path / "teacher.ckpt")
        teacher, student = pretrain(_images(rng), cfg, out_path=path, log_rows=rows)
        assert len(rows) == cfg.steps
        for step, loss, lam, ent in rows:
            assert np.isfinite(loss) and loss > 0
            assert 0.996 <= lam <= 1.0
            assert 0 <= ent <= np.log(cfg.k) + 1e-9
        lams = [r[2] for r in rows]
        assert lams == sorted(lams)

        arrays = load_checkpoint(path)
        assert "pretext.center" in arrays
        assert set(teacher.params.names()) <= set(arrays)
        np.testing.assert_array_equal(arrays["pretext.center"], teacher.center)

    def test_training_moves_student_and_teacher(self, rng):
        cfg = _tiny_cfg()
        images = _images(rng)
        init = build_pretext_params(np.random.default_rng(cfg.seed), cfg)
        teacher, student = pretrain(images, cfg)
        assert any(not np.array_equal(student[n].data, init[n].data)
                   for n in student.names())
        assert any(not np.array_equal(teacher.params[n].data, init[n].data)
                   for n in teacher.params.names())

    def test_runs_are_bit_identical(self, tmp_path, rng):
        images = _images(rng)
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        pretrain(images, _tiny_cfg(), out_path=p1)
        pretrain(images, _tiny_cfg(), out_path=p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            pretrain([], _tiny_cfg())
