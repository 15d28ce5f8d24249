"""Self-distillation pretraining.

Two augmented views of each image feed a student and a teacher that share one
architecture (backbone + projection head). The student minimizes the
cross-entropy between its tempered output distribution and the teacher's
sharper one; the teacher's weights trail the student by an exponential moving
average whose decay follows a cosine schedule. Teacher logits are centered by
a running mean before the softmax, which counteracts collapse onto a single
output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from . import tensor as T
from .backbone import BackboneConfig, build_backbone_params, extract_features
from .data.checkpoint import save_checkpoint
from .errors import DataError
from .ops import resize_array_bilinear
from .optim import Adam
from .params import ParamStore, he_linear, zeros
from .tensor import Tape, Tensor, backward


@dataclass
class AugmentationSpec:
    color_jitter: bool = True
    jitter_range: tuple[float, float] = (0.8, 1.2)
    crop: bool = True
    crop_area: tuple[float, float] = (0.5, 1.0)
    gaussian_noise: bool = True
    noise_sigma: float = 0.05
    hflip: bool = True
    hflip_prob: float = 0.5

    @classmethod
    def disabled(cls) -> "AugmentationSpec":
        return cls(color_jitter=False, crop=False, gaussian_noise=False, hflip=False)


def augment(image: np.ndarray, spec: AugmentationSpec,
            rng: np.random.Generator) -> np.ndarray:
    """One random view of a (3, H, W) image in [0,1]; output clamped to [0,1]."""
    img = np.asarray(image, dtype=np.float32)
    _, h, w = img.shape
    if spec.crop:
        area = float(rng.uniform(*spec.crop_area))
        side = np.sqrt(area)
        ch = max(1, int(round(h * side)))
        cw = max(1, int(round(w * side)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = img[:, top:top + ch, left:left + cw]
        if (ch, cw) != (h, w):
            img = resize_array_bilinear(img, (h, w)).astype(np.float32)
    if spec.hflip and rng.random() < spec.hflip_prob:
        img = img[:, :, ::-1]
    if spec.color_jitter:
        brightness = float(rng.uniform(*spec.jitter_range))
        contrast = float(rng.uniform(*spec.jitter_range))
        img = img * brightness
        mean = img.mean()
        img = mean + (img - mean) * contrast
    if spec.gaussian_noise and spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class PretextConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    tau_s: float = 0.1
    tau_t: float = 0.04
    k: int = 256
    hidden: int = 512
    lambda_base: float = 0.996
    center_momentum: float = 0.9
    head_init_gain: float = 0.1
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    augmentations: AugmentationSpec = field(default_factory=AugmentationSpec)


def build_head_params(rng: np.random.Generator, feat_dim: int, cfg: PretextConfig,
                      store: Optional[ParamStore] = None,
                      prefix: str = "head") -> ParamStore:
    """3-layer MLP: feat_dim -> hidden -> hidden -> K.

    The final layer is scaled down by head_init_gain so initial logits are
    small and both output distributions start near uniform.
    """
    p = store if store is not None else ParamStore()
    p.add(f"{prefix}.l1.w", he_linear(rng, cfg.hidden, feat_dim))
    p.add(f"{prefix}.l1.b", zeros(cfg.hidden))
    p.add(f"{prefix}.l2.w", he_linear(rng, cfg.hidden, cfg.hidden))
    p.add(f"{prefix}.l2.b", zeros(cfg.hidden))
    p.add(f"{prefix}.l3.w", he_linear(rng, cfg.k, cfg.hidden, gain=cfg.head_init_gain))
    p.add(f"{prefix}.l3.b", zeros(cfg.k))
    return p


def build_pretext_params(rng: np.random.Generator, cfg: PretextConfig) -> ParamStore:
    p = build_backbone_params(rng, cfg.backbone)
    build_head_params(rng, cfg.backbone.stage_channels[-1], cfg, store=p)
    return p


def _head_logits(view: Tensor, params: ParamStore, cfg: PretextConfig) -> Tensor:
    feats = extract_features(view, params, cfg.backbone)
    f4 = feats[-1]
    pool_axes = (2, 3) if f4.ndim == 4 else (1, 2)
    x = f4.mean(axis=pool_axes)
    x = T.relu(F.linear(x, params["head.l1.w"], params["head.l1.b"]))
    x = T.relu(F.linear(x, params["head.l2.w"], params["head.l2.b"]))
    return F.linear(x, params["head.l3.w"], params["head.l3.b"])


def student_dist(view: Tensor, params: ParamStore, cfg: PretextConfig) -> Tensor:
    """p_s rows over K classes; gradients flow into params when taped."""
    if not cfg.tau_s > 0:
        raise ValueError(f"tau_s must be positive, got {cfg.tau_s}")
    return F.softmax(_head_logits(view, params, cfg), axis=-1, tau=cfg.tau_s)


@dataclass
class TeacherState:
    params: ParamStore  # same names as the student; requires_grad is False
    center: np.ndarray  # (K,) running mean of teacher logits
    lambda_base: float = 0.996
    step: int = 0
    total_steps: int = 0


def make_teacher(student: ParamStore, cfg: PretextConfig) -> TeacherState:
    return TeacherState(params=student.copy(), center=np.zeros(cfg.k, dtype=np.float32),
                        lambda_base=cfg.lambda_base, step=0, total_steps=cfg.steps)


def teacher_logits(view: Tensor, teacher: TeacherState, cfg: PretextConfig) -> np.ndarray:
    """Raw head outputs of the teacher network; never part of any tape."""
    return _head_logits(view.detach(), teacher.params, cfg).data


def teacher_dist(view: Tensor, teacher: TeacherState, cfg: PretextConfig) -> Tensor:
    """p_t rows from centered, sharpened teacher logits; carries no gradient."""
    if not cfg.tau_t > 0:
        raise ValueError(f"tau_t must be positive, got {cfg.tau_t}")
    logits = teacher_logits(view, teacher, cfg)
    return F.softmax(Tensor(logits - teacher.center), axis=-1, tau=cfg.tau_t)


def pretext_loss(p_t: Tensor, p_s: Tensor) -> Tensor:
    """Cross-entropy H(p_t, p_s), averaged over any batch axis.

    p_t is treated as a constant; p_s entries are floored at 1e-12 before the
    log so a fully saturated student cannot produce -inf.
    """
    logp = T.log(T.clip_min(p_s, 1e-12))
    per = -(p_t.detach() * logp).sum(axis=-1)
    return per.mean() if per.ndim else per


def entropy(p: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of distribution rows."""
    q = np.clip(np.asarray(p, dtype=np.float64), 1e-12, None)
    return float(-(q * np.log(q)).sum(axis=-1).mean())


def usage_entropy(p: np.ndarray) -> float:
    """Entropy (nats) of the mean distribution over rows.

    Near log K when classes are used evenly across a batch; near zero when
    one class dominates, which is the collapse signature worth monitoring.
    Individual rows may be arbitrarily sharp without lowering it.
    """
    rows = np.asarray(p, dtype=np.float64).reshape(-1, np.shape(p)[-1])
    return entropy(rows.mean(axis=0))


def cosine_lambda(step: int, total_steps: int, lambda_base: float = 0.996) -> float:
    """EMA decay rising from lambda_base at step 0 to 1.0 at total_steps."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if total_steps <= 0 or step >= total_steps:
        return 1.0
    return 1.0 - (1.0 - lambda_base) * (np.cos(np.pi * step / total_steps) + 1.0) / 2.0


def ema_update(teacher: TeacherState, student: ParamStore, lam: float) -> None:
    """theta_t <- lam * theta_t + (1 - lam) * theta_s, tensor by tensor."""
    for name, s in student.items():
        t = teacher.params[name]
        if t.shape != s.shape:
            raise ValueError(f"teacher tensor {name!r} shape {t.shape} != student {s.shape}")
        t.data *= lam
        t.data += (1.0 - lam) * s.data


def center_update(center: np.ndarray, teacher_logits_batch: np.ndarray,
                  momentum: float = 0.9) -> np.ndarray:
    """center <- momentum * center + (1 - momentum) * batch mean of logits."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0,1), got {momentum}")
    batch = np.asarray(teacher_logits_batch, dtype=np.float32)
    if batch.ndim == 1:
        batch = batch[None]
    return (momentum * np.asarray(center, dtype=np.float32)
            + (1.0 - momentum) * batch.mean(axis=0))


def pretrain(images: Sequence[np.ndarray], cfg: PretextConfig,
             out_path: Optional[str] = None,
             log_rows: Optional[list] = None) -> tuple[TeacherState, ParamStore]:
    """Run the self-distillation loop over (3, H, W) images in [0,1].

    Appends (step, loss, lambda, teacher_entropy) tuples to log_rows when
    given; teacher_entropy is the usage entropy of the batch's teacher
    distributions (the collapse indicator). Writes the teacher checkpoint
    to out_path when given.
    """
    if len(images) == 0:
        raise DataError("pretraining requires at least one image")
    rng = np.random.default_rng(cfg.seed)
    student = build_pretext_params(rng, cfg)
    teacher = make_teacher(student, cfg)
    opt = Adam(student.tensors(), lr=cfg.lr)

    for step in range(cfg.steps):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        student_views = np.stack([augment(images[i], cfg.augmentations, rng) for i in idx])
        teacher_views = np.stack([augment(images[i], cfg.augmentations, rng) for i in idx])

        p_t = teacher_dist(Tensor(teacher_views), teacher, cfg)
        with Tape() as tape:
            p_s = student_dist(Tensor(student_views), student, cfg)
            loss = pretext_loss(p_t, p_s)
        opt.zero_grad()
        backward(loss, tape, params=student.tensors())
        opt.step()

        lam = cosine_lambda(step, cfg.steps, cfg.lambda_base)
        ema_update(teacher, student, lam)
        t_logits = teacher_logits(Tensor(teacher_views), teacher, cfg)
        teacher.center = center_update(teacher.center, t_logits, cfg.center_momentum)
        teacher.step = step + 1

        if log_rows is not None:
            log_rows.append((step, loss.data.item(), lam, usage_entropy(p_t.data)))

    if out_path is not None:
        arrays = dict(teacher.params.arrays())
        arrays["pretext.center"] = teacher.center
        save_checkpoint(out_path, arrays)
    return teacher, student
