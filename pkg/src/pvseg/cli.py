"""Command-line surface: data generation, pretraining, training, eval, inference.

    pvseg gen-data  --spec scene.cfg --seed 1 --n 100 --out data/
    pvseg pretrain  --config run.cfg --data data/manifest.tsv --out teacher.ckpt
    pvseg train     --config run.cfg --data data/manifest.tsv \\
                    [--init teacher.ckpt] --out model.ckpt
    pvseg eval      --model model.ckpt --data data/manifest.tsv --fold test
    pvseg infer     --model model.ckpt --image tile.ppm --out mask.pgm [--prob p.pgm]
    pvseg inspect   model.ckpt

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.

Every command validates its inputs before creating any output file. Training
logs stream to `<log>.partial` and are renamed into place on success, so an
aborted run leaves only explicitly `.partial`-suffixed artifacts behind.

Heavy imports happen inside the command handlers: `--threads` pins the BLAS
thread-count environment variables, which must be set before numpy loads
(`--threads 1`, the default, makes runs bit-reproducible).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, DataError, NumericError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")

# Extra per-run settings stored in model checkpoints (as 1-element f32 arrays)
# so `eval` and `infer` need no config file: tensor shapes pin down the
# architecture except for these.
META_GN_GROUPS = "meta.gn_groups"
META_N_HEADS = "meta.n_heads"
META_THRESHOLD = "meta.threshold"
META_NORMALIZED = "meta.normalized_fusion"


def _set_thread_env(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


# -- shared plumbing -----------------------------------------------------------


class _StreamedRows(list):
    """Log-row sink that mirrors every appended row to an open CSV file."""

    def __init__(self, f):
        super().__init__()
        self._f = f

    def append(self, row):
        super().append(row)
        self._f.write(",".join(_fmt_field(v) for v in row) + "\n")
        self._f.flush()


def _fmt_field(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    # repr of a Python float is shortest-roundtrip, so logs are bit-stable
    return repr(float(v))


def _ensure_parent_dir(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _resize_pair(img, mask, size: int):
    import numpy as np

    from .ops import resize_array_bilinear, resize_array_nearest

    if img.shape[1:] != (size, size):
        img = resize_array_bilinear(img, (size, size)).astype(np.float32)
        if mask is not None:
            mask = resize_array_nearest(mask, (size, size))
    return img, mask


def _load_fold_pairs(records, fold: str, size: int, manifest_path: str):
    """Labeled (image, mask) arrays for one fold, resized to size x size."""
    from .data.loading import load_sample
    from .data.manifest import fold_records

    pairs = []
    for rec in fold_records(records, fold):
        if rec.mask_path is None:
            raise DataError(
                f"{manifest_path}: {rec.image_path} in fold {fold!r} has no mask")
        img_t, mask_t = load_sample(rec)
        pairs.append(_resize_pair(img_t.data, mask_t.data, size))
    return pairs


def _fold_counts_table(records) -> str:
    """Per-fold positive/negative/total counts, masks decide positivity."""
    from .data.pnm import load_pgm

    folds = ["train", "val", "test"]
    pos = dict.fromkeys(folds, 0)
    neg = dict.fromkeys(folds, 0)
    for rec in records:
        has_panels = rec.mask_path is not None and bool(load_pgm(rec.mask_path).any())
        bucket = pos if has_panels else neg
        bucket[rec.split] = bucket.get(rec.split, 0) + 1
    lines = [f"{'fold':<8}{'positive':>10}{'negative':>10}{'total':>8}"]
    for f in folds:
        lines.append(f"{f:<8}{pos[f]:>10}{neg[f]:>10}{pos[f] + neg[f]:>8}")
    lines.append(f"{'total':<8}{sum(pos.values()):>10}{sum(neg.values()):>10}"
                 f"{len(records):>8}")
    return "\n".join(lines)


def _model_config_from_arrays(arrays, path: str):
    """(ModelConfig, threshold, normalized) back from a checkpoint's contents."""
    from .backbone import BackboneConfig
    from .model import ModelConfig
    from .seghead import SegHeadConfig

    def shape_of(name):
        if name not in arrays:
            raise DataError(f"{path}: missing tensor {name!r}; not a model checkpoint?")
        return arrays[name].shape

    def count_layers(fmt):
        n = 0
        while fmt.format(n) in arrays:
            n += 1
        return n

    def meta_value(name, default=None):
        if name in arrays:
            return float(arrays[name].reshape(-1)[0])
        if default is not None:
            return default
        raise DataError(
            f"{path}: missing tensor {name!r}; only checkpoints written by "
            f"`pvseg train` carry the settings eval/infer need")

    stage_channels = tuple(int(shape_of(f"backbone.s{i}.b0.conv1")[0])
                           for i in range(1, 5))
    blocks = tuple(count_layers(f"backbone.s{i}.b{{}}.conv1") for i in range(1, 5))
    n_queries, c_e = (int(v) for v in shape_of("dec.q0"))
    backbone = BackboneConfig(stage_channels=stage_channels,
                              blocks_per_stage=blocks,
                              gn_groups=int(meta_value(META_GN_GROUPS)))
    head = SegHeadConfig(n_queries=n_queries,
                         c_e=c_e,
                         c_d=int(shape_of("enc.level2")[0]),
                         n_heads=int(meta_value(META_N_HEADS)),
                         encoder_rounds=count_layers("enc.r{}.q.w"),
                         ffn_hidden=int(shape_of("dec.l0.ffn.w1")[0]),
                         decoder_layers=count_layers("dec.l{}.cross.q.w"))
    threshold = meta_value(META_THRESHOLD, default=0.5)
    normalized = bool(meta_value(META_NORMALIZED, default=1.0))
    return ModelConfig(backbone=backbone, head=head), threshold, normalized


def _load_params(arrays, path: str):
    """ParamStore rebuilt from checkpoint arrays, plus its inferred configs."""
    import numpy as np

    from .model import build_model_params

    mcfg, threshold, normalized = _model_config_from_arrays(arrays, path)
    params = build_model_params(np.random.default_rng(0), mcfg)
    params.load_arrays(arrays)
    return params, mcfg, threshold, normalized


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .config import load_scene_spec
    from .data.synth import generate_synthetic

    spec = load_scene_spec(args.spec)
    manifest_path, records = generate_synthetic(spec, args.seed, args.n, args.out)
    print(_fold_counts_table(records))
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def _pick_pretrain_records(records, manifest_path: str):
    from .data.manifest import fold_records

    train_fold = fold_records(records, "train")
    if train_fold:
        return train_fold, "train fold"
    if records:
        return list(records), "all records (no train fold assigned)"
    raise DataError(f"{manifest_path}: manifest is empty")


def cmd_pretrain(args) -> int:
    from .config import load_run_config
    from .data.loading import load_sample
    from .data.manifest import parse_manifest
    from .pretext import pretrain

    cfg = load_run_config(args.config)
    records = parse_manifest(args.data)
    chosen, origin = _pick_pretrain_records(records, args.data)
    images = []
    for rec in chosen:
        img_t, _ = load_sample(rec)
        img, _ = _resize_pair(img_t.data, None, cfg.image_size)
        images.append(img)

    log_path = args.log or args.out + ".log.csv"
    _ensure_parent_dir(args.out)
    _ensure_parent_dir(log_path)
    print(f"pretraining on {len(images)} images ({origin})")
    with open(log_path + ".partial", "w", encoding="utf-8") as log_f:
        rows = _StreamedRows(log_f)
        try:
            pretrain(images, cfg.pretext_config(),
                     out_path=args.out + ".partial", log_rows=rows)
        except NumericError:
            print(f"partial log left at {log_path}.partial", file=sys.stderr)
            raise
    os.replace(args.out + ".partial", args.out)
    os.replace(log_path + ".partial", log_path)
    print(f"final loss {rows[-1][1]:.4f} after {len(rows)} steps")
    print(f"teacher checkpoint: {args.out}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    import numpy as np

    from .config import load_run_config
    from .data.checkpoint import load_checkpoint, save_checkpoint
    from .data.manifest import parse_manifest
    from .model import build_model_params
    from .train import train

    cfg = load_run_config(args.config)
    tc = cfg.train_config()
    records = parse_manifest(args.data)
    train_pairs = _load_fold_pairs(records, "train", cfg.image_size, args.data)
    val_pairs = _load_fold_pairs(records, "val", cfg.image_size, args.data)

    init_arrays = None
    if args.init is not None:
        init_arrays = load_checkpoint(args.init)
        # surface name/shape mismatches before any output file exists
        probe = build_model_params(np.random.default_rng(0), tc.model)
        probe.load_arrays(init_arrays, prefix="backbone")

    log_path = args.log or args.out + ".log.csv"
    _ensure_parent_dir(args.out)
    _ensure_parent_dir(log_path)
    print(f"training on {len(train_pairs)} images, validating on {len(val_pairs)}")
    with open(log_path + ".partial", "w", encoding="utf-8") as log_f:
        rows = _StreamedRows(log_f)
        try:
            params = train(train_pairs, val_pairs, tc,
                           init_arrays=init_arrays, log_rows=rows)
        except NumericError:
            print(f"partial log left at {log_path}.partial", file=sys.stderr)
            raise
    arrays = dict(params.arrays())
    arrays[META_GN_GROUPS] = np.array([cfg.backbone_gn_groups], dtype=np.float32)
    arrays[META_N_HEADS] = np.array([cfg.model_heads], dtype=np.float32)
    arrays[META_THRESHOLD] = np.array([cfg.infer_threshold], dtype=np.float32)
    arrays[META_NORMALIZED] = np.array([float(cfg.infer_normalized_fusion)],
                                       dtype=np.float32)
    save_checkpoint(args.out + ".partial", arrays)
    os.replace(args.out + ".partial", args.out)
    os.replace(log_path + ".partial", log_path)
    final_iou = next((r[2] for r in reversed(rows) if r[2] is not None), None)
    tail = f", final val IoU {final_iou:.4f}" if final_iou is not None else ""
    print(f"final loss {rows[-1][1]:.4f} after {len(rows)} steps{tail}")
    print(f"model checkpoint: {args.out}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from dataclasses import asdict

    from .data.checkpoint import load_checkpoint
    from .data.loading import load_sample
    from .data.manifest import fold_records, parse_manifest
    from .metrics import accuracy, f1, iou
    from .train import TrainConfig, evaluate_model

    arrays = load_checkpoint(args.model)
    params, mcfg, threshold, normalized = _load_params(arrays, args.model)
    records = parse_manifest(args.data)
    pairs = []
    for rec in fold_records(records, args.fold):
        if rec.mask_path is None:
            raise DataError(
                f"{args.data}: {rec.image_path} in fold {args.fold!r} has no mask")
        img_t, mask_t = load_sample(rec)
        pairs.append((img_t.data, mask_t.data))
    if not pairs:
        raise DataError(f"{args.data}: fold {args.fold!r} is empty")

    tc = TrainConfig(threshold=threshold, normalized_fusion=normalized, model=mcfg)
    counts = evaluate_model(pairs, params, tc)
    report = {"fold": args.fold, "n_images": len(pairs)}
    report.update(asdict(counts))
    report.update(iou=iou(counts), f1=f1(counts), accuracy=accuracy(counts))
    text = json.dumps(report, indent=2)
    print(text)
    report_path = args.report or f"{args.model}.{args.fold}.metrics.json"
    _ensure_parent_dir(report_path)
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(text + "\n")
    print(f"report: {report_path}", file=sys.stderr)
    return EXIT_OK


def cmd_infer(args) -> int:
    import numpy as np

    from .data.checkpoint import load_checkpoint
    from .data.loading import load_image
    from .data.pnm import save_pgm
    from .model import segment
    from .tensor import Tensor

    arrays = load_checkpoint(args.model)
    params, mcfg, threshold, normalized = _load_params(arrays, args.model)
    img = load_image(args.image)
    fused = segment(Tensor(img), params, mcfg,
                    threshold=threshold, normalized=normalized)
    _ensure_parent_dir(args.out)
    save_pgm(args.out, fused.mask.astype(np.uint8) * 255)
    print(f"mask: {args.out} ({int(fused.mask.sum())} positive px "
          f"of {fused.mask.size})")
    if args.prob is not None:
        _ensure_parent_dir(args.prob)
        save_pgm(args.prob, np.round(fused.prob * 255.0).astype(np.uint8))
        print(f"probability map: {args.prob}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .data.checkpoint import load_checkpoint

    arrays = load_checkpoint(args.checkpoint)
    total = 0
    for name, arr in arrays.items():
        print(f"{name:<28} {str(arr.dtype):<8} {arr.shape}")
        total += arr.size
    print(f"{len(arrays)} tensors, {total} values")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, metavar="N",
                        help="BLAS thread count; 1 (default) is bit-reproducible")

    p = argparse.ArgumentParser(prog="pvseg",
                                description="Solar-panel segmentation pipeline.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen-data", parents=[common],
                       help="render a synthetic labeled dataset")
    g.add_argument("--spec", required=True, help="scene-spec key=value file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, required=True, help="number of scenes")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    pre = sub.add_parser("pretrain", parents=[common],
                         help="self-distillation pretraining of the backbone")
    pre.add_argument("--config", required=True, help="run-config key=value file")
    pre.add_argument("--data", required=True, help="dataset manifest")
    pre.add_argument("--out", required=True, help="teacher checkpoint path")
    pre.add_argument("--log", help="CSV log path (default: <out>.log.csv); rows "
                                   "are step,loss,lambda,teacher_entropy")
    pre.set_defaults(func=cmd_pretrain)

    tr = sub.add_parser("train", parents=[common],
                        help="train the segmentation model")
    tr.add_argument("--config", required=True, help="run-config key=value file")
    tr.add_argument("--data", required=True, help="dataset manifest")
    tr.add_argument("--init", help="teacher checkpoint to seed the backbone from")
    tr.add_argument("--out", required=True, help="model checkpoint path")
    tr.add_argument("--log", help="CSV log path (default: <out>.log.csv); rows "
                                  "are step,loss,val_iou")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common],
                        help="score a checkpoint on one manifest fold")
    ev.add_argument("--model", required=True, help="model checkpoint")
    ev.add_argument("--data", required=True, help="dataset manifest")
    ev.add_argument("--fold", default="test", help="fold to score (default: test)")
    ev.add_argument("--report", help="JSON report path "
                                     "(default: <model>.<fold>.metrics.json)")
    ev.set_defaults(func=cmd_eval)

    inf = sub.add_parser("infer", parents=[common],
                         help="segment one image")
    inf.add_argument("--model", required=True, help="model checkpoint")
    inf.add_argument("--image", required=True, help="input PPM image")
    inf.add_argument("--out", required=True, help="output binary mask PGM (0/255)")
    inf.add_argument("--prob", help="also write the probability map as a PGM")
    inf.set_defaults(func=cmd_infer)

    ins = sub.add_parser("inspect", parents=[common],
                         help="list a checkpoint's tensors")
    ins.add_argument("checkpoint")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    _set_thread_env(args.threads)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
