"""Command-line entry point: ``dsrdiff <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .data import (DataError, DatasetSplit, denormalize_depth, load_dataset, normalize_depth,
                   read_color, read_depth, synthetic_split, write_depth_png,
                   write_synthetic_dataset)
from .evaluation import (evaluate, evaluate_bicubic, profile, render_split, run_ablation,
                         write_metrics_csv)
from .model import load_checkpoint, save_checkpoint
from .training import train_stage1, train_stage2

log = logging.getLogger("dsrdiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_data_args(p):
    p.add_argument("--root", default=os.environ.get("DSRDIFF_DATA_ROOT"),
                   help="dataset root (default: $DSRDIFF_DATA_ROOT)")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--synthetic", type=int, default=4,
                   help="in-memory synthetic scenes when no root is given")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--crop-to-scale", action="store_true",
                   help="center-crop images whose size is not divisible by the scale")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsrdiff", description="Guided depth super-resolution with a latent diffusion prior.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="write synthetic scenes in the dataset layout")
    p.add_argument("--root", required=True)
    p.add_argument("--synthetic", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="run training stage 1 or 2")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config")
    p.add_argument("--preset", choices=tuple(cfgmod.PRESETS), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="stage 1: initial weights; stage 2: the stage-1 checkpoint")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    _add_data_args(p)

    p = sub.add_parser("eval", help="score a checkpoint (or bicubic) on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=("model", "bicubic"), default="model")
    p.add_argument("--source", choices=("grn", "ggn", "none"), default="grn")
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--protocol", choices=("cm", "range255", "normalized"), default=None)
    p.add_argument("--crop", type=int, default=0, help="border pixels excluded from RMSE")
    p.add_argument("--render", action="store_true", help="write SR and error maps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/eval")
    _add_data_args(p)

    p = sub.add_parser("infer", help="super-resolve one LR depth map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--color", required=True)
    p.add_argument("--depth-lr", required=True)
    p.add_argument("--out", required=True, help="output .png (16-bit mm) or .npy (meters)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train and score ablation variants")
    p.add_argument("--variants", default="M-1,M-2,M-3,M-4,M-5")
    p.add_argument("--config")
    p.add_argument("--preset", choices=tuple(cfgmod.PRESETS), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--protocol", choices=("cm", "range255", "normalized"), default=None)
    p.add_argument("--out", default="runs/ablate")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    _add_data_args(p)

    p = sub.add_parser("profile", help="parameter count and inference time")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-size", default="256x256", help="HR input size HxW")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--source", choices=("grn", "ggn", "none"), default="grn")
    p.add_argument("--out", default="runs/profile")
    return parser


def _resolve_config(args):
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if path.suffix == ".json":
            values.update(json.loads(path.read_text())["config"])
        else:
            values.update(cfgmod.read_config_file(path))
    values.update(cfgmod.parse_overrides(getattr(args, "overrides", [])))
    values["seed"] = args.seed
    values.pop("preset", None)
    stage = getattr(args, "stage", None)
    if stage is not None:
        values["stage"] = stage
    return cfgmod.preset(args.preset, **values)


def _write_run_record(out_dir, args, model_cfg=None, train_cfg=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": args.command, "argv": sys.argv[1:] if args.argv is None else args.argv,
              "args": {k: v for k, v in vars(args).items() if k != "argv"}}
    if model_cfg is not None:
        flat = dataclasses.asdict(model_cfg)
        flat.update(dataclasses.asdict(train_cfg))
        flat.pop("preset")
        record["preset"] = train_cfg.preset
        record["config"] = flat
    (out / "run.json").write_text(json.dumps(record, indent=2, default=str))


def _load_split(args, scale, seed) -> DatasetSplit:
    if args.root:
        return load_dataset(args.root, args.dataset, scale, seed=seed, crop=args.crop_to_scale,
                            allow_partial=True)
    if args.dataset != "synthetic":
        raise DataError(f"no data root given for dataset {args.dataset!r} (set --root or DSRDIFF_DATA_ROOT)")
    return synthetic_split(args.synthetic, args.size, scale, seed=seed)


def cmd_prepare_data(args):
    _write_run_record(args.root, args)
    folder = write_synthetic_dataset(args.root, args.synthetic, args.size, args.seed)
    print(f"wrote {args.synthetic} scenes to {folder}")


def cmd_train(args):
    model_cfg, train_cfg = _resolve_config(args)
    out = Path(args.out)
    _write_run_record(out, args, model_cfg, train_cfg)
    data = _load_split(args, model_cfg.scale, train_cfg.seed)
    history_path = out / "metrics.csv"
    if train_cfg.stage == 1:
        model = load_checkpoint(args.resume).build_model() if args.resume else None
        ck = train_stage1(data, train_cfg, model_cfg, model=model, history_path=history_path)
    else:
        if not args.resume:
            raise DataError("stage 2 needs the stage-1 checkpoint via --resume")
        ck = train_stage2(data, train_cfg, load_checkpoint(args.resume), history_path=history_path)
    path = save_checkpoint(ck, out / "checkpoint.npz")
    print(f"stage {train_cfg.stage}: {len(ck.history)} steps, final loss {ck.history[-1]['loss']:.6f}; saved {path}")


def cmd_eval(args):
    _write_run_record(args.out, args)
    if args.method == "bicubic":
        split = _load_split(args, args.scale or 4, args.seed)
        rec = evaluate_bicubic(split, args.protocol, args.crop)
    else:
        if not args.checkpoint:
            raise UsageError("eval --method model requires --checkpoint")
        ck = load_checkpoint(args.checkpoint)
        model = ck.build_model()
        split = _load_split(args, args.scale or model.cfg.scale, args.seed)
        rec = evaluate(model, split, args.scale, args.protocol, args.source, args.crop, args.seed)
        if args.render:
            render_split(model, split, args.out, args.source, args.seed)
    write_metrics_csv(Path(args.out) / "metrics.csv", [rec])
    print(f"{rec.dataset} x{rec.scale} {rec.variant}: avg RMSE {rec.avg_rmse:.4f} ({rec.unit}, {len(rec.per_image_rmse)} images)")


def cmd_infer(args):
    out = Path(args.out)
    _write_run_record(out.parent, args)
    model = load_checkpoint(args.checkpoint).build_model()
    s = model.cfg.scale
    color = read_color(Path(args.color))
    depth_lr_m = read_depth(Path(args.depth_lr))
    h, w = depth_lr_m.shape
    if color.shape[:2] != (h * s, w * s):
        raise DataError(f"color {color.shape[:2]} does not match LR depth {h}x{w} at scale x{s}")
    # normalize with the LR map's own range; the HR map is unknown at test time
    norm, lo, hi = normalize_depth(depth_lr_m[..., None])
    depth_lr = torch.from_numpy(norm).permute(2, 0, 1)[None]
    color_t = torch.from_numpy(color).permute(2, 0, 1)[None]
    sr = model.predict(depth_lr, color_t, source="grn",
                       generator=torch.Generator().manual_seed(args.seed))
    sr_m = denormalize_depth(sr[0, 0].numpy(), lo, hi)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".npy":
        np.save(out, sr_m)
    else:
        write_depth_png(out, sr_m)
    print(f"wrote {out} ({sr_m.shape[0]}x{sr_m.shape[1]})")


def cmd_ablate(args):
    args.stage = None
    model_cfg, train_cfg = _resolve_config(args)
    _write_run_record(args.out, args, model_cfg, train_cfg)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    data = _load_split(args, model_cfg.scale, train_cfg.seed)
    records = run_ablation(variants, data, train_cfg, model_cfg, protocol=args.protocol,
                           csv_path=Path(args.out) / "ablation.csv")
    for r in records:
        print(f"{r.variant}: avg RMSE {r.avg_rmse:.4f} ({r.unit}), params {r.param_count}")


def cmd_profile(args):
    _write_run_record(args.out, args)
    try:
        h, w = (int(v) for v in args.input_size.lower().split("x"))
    except ValueError:
        raise UsageError(f"--input-size must look like HxW, got {args.input_size!r}") from None
    n, ms = profile(load_checkpoint(args.checkpoint), (h, w), args.runs, args.source)
    path = Path(args.out) / "profile.csv"
    path.write_text(f"param_count,ms_per_image,input_size\n{n},{ms:.4f},{h}x{w}\n")
    print(f"params {n}, {ms:.2f} ms/image at {h}x{w}")


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "profile": cmd_profile,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        args.argv = list(argv) if argv is not None else None
        COMMANDS[args.command](args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except (KeyError, ValueError) as err:
        # bad config keys / values surface here before any work is done
        print(f"dsrdiff: error: {err}", file=sys.stderr)
        return 1 if isinstance(err, KeyError) else 2
    except (FileNotFoundError, DataError, RuntimeError, OSError) as err:
        print(f"dsrdiff: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        print(f"dsrdiff: error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
