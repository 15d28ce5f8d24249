"""Flat key=value run configuration shared by all commands.

The file format is deliberately plain: one `key = value` per line, `#`
comments, blank lines ignored. Every key has a default, so an empty file is a
valid configuration; unknown or duplicate keys are errors so typos fail loudly
instead of silently training with a default.

Keys and defaults:

    seed = 0                                 RNG seed for all stages
    image_size = 64                          square side images are resized to
    backbone.stage_channels = 16,32,64,128   channels per residual stage
    backbone.blocks_per_stage = 1,1,1,1      residual blocks per stage
    backbone.gn_groups = 8                   group-norm group count
    pretext.steps = 200                      self-distillation steps
    pretext.batch_size = 8
    pretext.lr = 0.001
    pretext.tau_s = 0.1                      student softmax temperature
    pretext.tau_t = 0.04                     teacher softmax temperature
    pretext.k = 256                          projection-head output dimension
    pretext.hidden = 512                     projection-head hidden width
    pretext.lambda_base = 0.996              EMA momentum at step 0
    pretext.center_momentum = 0.9            teacher-centering momentum
    pretext.head_init_gain = 0.1             final-layer init scale
    pretext.augmentations = all              all | none | comma list of
                                             color_jitter,crop,noise,hflip
    model.n_queries = 16                     segment queries
    model.c_e = 32                           per-pixel embedding width
    model.c_d = 64                           encoder/decoder token width
    model.heads = 4                          attention heads
    model.encoder_rounds = 3                 deformable-free encoder rounds
    model.ffn_hidden = 128                   decoder feed-forward width
    model.decoder_layers = 4                 masked-attention decoder layers
    train.steps = 2000
    train.batch_size = 8
    train.lr = 0.001
    train.eval_every = 200                   validation cadence in steps
    train.deep_supervision = false           supervise intermediate proposals
    infer.threshold = 0.5                    fused-probability cut
    infer.normalized_fusion = true           convex fusion weights (see fuse)

The scene-spec file used by data generation follows the same format with its
own key set (see SCENE_KEYS).
"""
from __future__ import annotations

from dataclasses import dataclass

from .backbone import BackboneConfig
from .data.synth import SyntheticSceneSpec
from .errors import ConfigError, DataError
from .model import ModelConfig
from .pretext import AugmentationSpec, PretextConfig
from .seghead import SegHeadConfig
from .train import TrainConfig

_AUG_NAMES = ("color_jitter", "crop", "noise", "hflip")


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 64
    backbone_stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    backbone_blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    backbone_gn_groups: int = 8
    pretext_steps: int = 200
    pretext_batch_size: int = 8
    pretext_lr: float = 1e-3
    pretext_tau_s: float = 0.1
    pretext_tau_t: float = 0.04
    pretext_k: int = 256
    pretext_hidden: int = 512
    pretext_lambda_base: float = 0.996
    pretext_center_momentum: float = 0.9
    pretext_head_init_gain: float = 0.1
    pretext_augmentations: tuple[str, ...] = _AUG_NAMES
    model_n_queries: int = 16
    model_c_e: int = 32
    model_c_d: int = 64
    model_heads: int = 4
    model_encoder_rounds: int = 3
    model_ffn_hidden: int = 128
    model_decoder_layers: int = 4
    train_steps: int = 2000
    train_batch_size: int = 8
    train_lr: float = 1e-3
    train_eval_every: int = 200
    train_deep_supervision: bool = False
    infer_threshold: float = 0.5
    infer_normalized_fusion: bool = True

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigError(
                f"image_size must be a positive multiple of 32, got {self.image_size}")
        for key, tup, n in (("backbone.stage_channels", self.backbone_stage_channels, 4),
                            ("backbone.blocks_per_stage", self.backbone_blocks_per_stage, 4)):
            if len(tup) != n:
                raise ConfigError(f"{key} needs exactly {n} values, got {len(tup)}")
            if any(v < 1 for v in tup):
                raise ConfigError(f"{key} values must be >= 1, got {tup}")
        if self.model_c_d % 4:
            raise ConfigError(f"model.c_d must divide by 4, got {self.model_c_d}")
        if self.model_c_d % self.model_heads or self.model_c_e % self.model_heads:
            raise ConfigError(
                f"model.heads={self.model_heads} must divide both "
                f"model.c_d={self.model_c_d} and model.c_e={self.model_c_e}")
        if not 0.0 <= self.infer_threshold <= 1.0:
            raise ConfigError(
                f"infer.threshold must be in [0,1], got {self.infer_threshold}")

    # -- assembled per-stage configurations -----------------------------------

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(stage_channels=tuple(self.backbone_stage_channels),
                              blocks_per_stage=tuple(self.backbone_blocks_per_stage),
                              gn_groups=self.backbone_gn_groups)

    def augmentation_spec(self) -> AugmentationSpec:
        on = set(self.pretext_augmentations)
        return AugmentationSpec(color_jitter="color_jitter" in on,
                                crop="crop" in on,
                                gaussian_noise="noise" in on,
                                hflip="hflip" in on)

    def pretext_config(self) -> PretextConfig:
        return PretextConfig(steps=self.pretext_steps,
                             batch_size=self.pretext_batch_size,
                             lr=self.pretext_lr,
                             tau_s=self.pretext_tau_s,
                             tau_t=self.pretext_tau_t,
                             k=self.pretext_k,
                             hidden=self.pretext_hidden,
                             lambda_base=self.pretext_lambda_base,
                             center_momentum=self.pretext_center_momentum,
                             head_init_gain=self.pretext_head_init_gain,
                             seed=self.seed,
                             backbone=self.backbone_config(),
                             augmentations=self.augmentation_spec())

    def model_config(self) -> ModelConfig:
        head = SegHeadConfig(n_queries=self.model_n_queries,
                             c_e=self.model_c_e,
                             c_d=self.model_c_d,
                             n_heads=self.model_heads,
                             encoder_rounds=self.model_encoder_rounds,
                             ffn_hidden=self.model_ffn_hidden,
                             decoder_layers=self.model_decoder_layers)
        return ModelConfig(backbone=self.backbone_config(), head=head)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.train_steps,
                           batch_size=self.train_batch_size,
                           lr=self.train_lr,
                           eval_every=self.train_eval_every,
                           seed=self.seed,
                           deep_supervision=self.train_deep_supervision,
                           threshold=self.infer_threshold,
                           normalized_fusion=self.infer_normalized_fusion,
                           model=self.model_config())


# -- value parsers -------------------------------------------------------------


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {raw!r}")


def _parse_int_tuple(key: str, raw: str) -> tuple[int, ...]:
    return tuple(_parse_int(key, part.strip()) for part in raw.split(","))


def _parse_float_pair(key: str, raw: str) -> tuple[float, float]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected two comma-separated numbers, got {raw!r}")
    return (_parse_float(key, parts[0]), _parse_float(key, parts[1]))


def _parse_int_pair(key: str, raw: str) -> tuple[int, int]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected two comma-separated integers, got {raw!r}")
    return (_parse_int(key, parts[0]), _parse_int(key, parts[1]))


def _parse_augmentations(key: str, raw: str) -> tuple[str, ...]:
    low = raw.lower()
    if low == "all":
        return _AUG_NAMES
    if low == "none":
        return ()
    names = tuple(part.strip() for part in low.split(","))
    for name in names:
        if name not in _AUG_NAMES:
            raise ConfigError(
                f"{key}: unknown augmentation {name!r} "
                f"(choose from {', '.join(_AUG_NAMES)}, or all/none)")
    return names


# key -> (RunConfig attribute, parser)
RUN_KEYS = {
    "seed": ("seed", _parse_int),
    "image_size": ("image_size", _parse_int),
    "backbone.stage_channels": ("backbone_stage_channels", _parse_int_tuple),
    "backbone.blocks_per_stage": ("backbone_blocks_per_stage", _parse_int_tuple),
    "backbone.gn_groups": ("backbone_gn_groups", _parse_int),
    "pretext.steps": ("pretext_steps", _parse_int),
    "pretext.batch_size": ("pretext_batch_size", _parse_int),
    "pretext.lr": ("pretext_lr", _parse_float),
    "pretext.tau_s": ("pretext_tau_s", _parse_float),
    "pretext.tau_t": ("pretext_tau_t", _parse_float),
    "pretext.k": ("pretext_k", _parse_int),
    "pretext.hidden": ("pretext_hidden", _parse_int),
    "pretext.lambda_base": ("pretext_lambda_base", _parse_float),
    "pretext.center_momentum": ("pretext_center_momentum", _parse_float),
    "pretext.head_init_gain": ("pretext_head_init_gain", _parse_float),
    "pretext.augmentations": ("pretext_augmentations", _parse_augmentations),
    "model.n_queries": ("model_n_queries", _parse_int),
    "model.c_e": ("model_c_e", _parse_int),
    "model.c_d": ("model_c_d", _parse_int),
    "model.heads": ("model_heads", _parse_int),
    "model.encoder_rounds": ("model_encoder_rounds", _parse_int),
    "model.ffn_hidden": ("model_ffn_hidden", _parse_int),
    "model.decoder_layers": ("model_decoder_layers", _parse_int),
    "train.steps": ("train_steps", _parse_int),
    "train.batch_size": ("train_batch_size", _parse_int),
    "train.lr": ("train_lr", _parse_float),
    "train.eval_every": ("train_eval_every", _parse_int),
    "train.deep_supervision": ("train_deep_supervision", _parse_bool),
    "infer.threshold": ("infer_threshold", _parse_float),
    "infer.normalized_fusion": ("infer_normalized_fusion", _parse_bool),
}

SCENE_KEYS = {
    "canvas_h": ("canvas_h", _parse_int),
    "canvas_w": ("canvas_w", _parse_int),
    "p_empty": ("p_empty", _parse_float),
    "max_panels": ("max_panels", _parse_int),
    "panel_px": ("panel_px", _parse_int_pair),
    "rotation_deg": ("rotation_deg", _parse_float_pair),
    "distractors": ("distractors", _parse_int_pair),
    "road_rects": ("road_rects", _parse_int_pair),
    "texture_sigma": ("texture_sigma", _parse_float),
}


def _parse_kv_lines(text: str, source: str) -> dict[str, str]:
    """`key = value` lines -> dict; comments and blanks skipped, duplicates rejected."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = raw.strip()
    return out


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for key, raw in _parse_kv_lines(text, source).items():
        if key not in RUN_KEYS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        attr, parse = RUN_KEYS[key]
        setattr(cfg, attr, parse(key, raw))
    cfg.validate()
    return cfg


def parse_scene_spec(text: str, source: str = "<spec>") -> SyntheticSceneSpec:
    kwargs = {}
    for key, raw in _parse_kv_lines(text, source).items():
        if key not in SCENE_KEYS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        attr, parse = SCENE_KEYS[key]
        kwargs[attr] = parse(key, raw)
    spec = SyntheticSceneSpec(**kwargs)
    try:
        spec.validate()
    except DataError as e:
        raise ConfigError(str(e)) from None
    return spec


def _read_text(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        raise DataError(f"{path}: cannot read ({e.strerror})") from None


def load_run_config(path: str) -> RunConfig:
    return parse_run_config(_read_text(path), source=path)


def load_scene_spec(path: str) -> SyntheticSceneSpec:
    return parse_scene_spec(_read_text(path), source=path)
