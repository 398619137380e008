"""RMSE protocols, error maps, efficiency profiling and the ablation harness."""
import csv
import dataclasses
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
from PIL import Image

from .config import ModelConfig, TrainConfig
from .data import DatasetSplit, RGBDSample
from .model import CheckpointManifest, DSRDiff, count_params
from .resize import imresize
from .training import to_batch, train_stage1, train_stage2

PROTOCOLS = ("cm", "range255", "normalized")
VARIANTS = ("M-1", "M-2", "M-3", "M-4", "M-5")
METRICS_FIELDS = (
    "dataset", "scale", "variant", "protocol", "avg_rmse", "n_images",
    "param_count", "ms_per_image", "seed",
)


class EvaluationError(Exception):
    pass


def is_nyu(dataset: str) -> bool:
    return dataset.startswith("nyu")


@dataclass
class MetricsRecord:
    dataset: str
    scale: int
    per_image_rmse: list
    avg_rmse: float
    unit: str
    variant: str = "M-5"
    param_count: int = 0
    ms_per_image: float = 0.0
    seed: int = 0
    diffusion_calls: int = 0

    def __post_init__(self):
        if self.unit not in PROTOCOLS:
            raise ValueError(f"unknown unit {self.unit!r}")
        if (self.unit == "cm") != is_nyu(self.dataset):
            raise ValueError(f"unit 'cm' is reserved for NYU data (dataset={self.dataset!r}, unit={self.unit!r})")
        if self.per_image_rmse and abs(self.avg_rmse - float(np.mean(self.per_image_rmse))) > 1e-9:
            raise ValueError("avg_rmse must equal the mean of per_image_rmse")

    def row(self) -> dict:
        return {
            "dataset": self.dataset, "scale": self.scale, "variant": self.variant,
            "protocol": self.unit, "avg_rmse": self.avg_rmse,
            "n_images": len(self.per_image_rmse), "param_count": self.param_count,
            "ms_per_image": self.ms_per_image, "seed": self.seed,
        }


def _crop(x: np.ndarray, crop: int) -> np.ndarray:
    return x[crop:x.shape[0] - crop, crop:x.shape[1] - crop] if crop else x


def rmse(d_gt, d_sr, protocol: str = "cm", crop: int = 0) -> float:
    """Root-mean-square error between native-unit depth maps.

    ``cm``: inputs in meters, error in centimeters. ``range255``: both maps
    mapped to [0, 255] with the ground truth's min/max. ``normalized``: plain RMS.
    """
    d_gt = np.asarray(d_gt, dtype=np.float64)
    d_sr = np.asarray(d_sr, dtype=np.float64)
    if d_gt.shape != d_sr.shape:
        raise ValueError(f"shape mismatch: {d_gt.shape} vs {d_sr.shape}")
    d_gt, d_sr = _crop(d_gt, crop), _crop(d_sr, crop)
    if protocol == "cm":
        diff = (d_gt - d_sr) * 100.0
    elif protocol == "range255":
        lo, hi = d_gt.min(), d_gt.max()
        span = hi - lo if hi > lo else 1.0
        diff = ((d_gt - lo) - (d_sr - lo)) * (255.0 / span)
    elif protocol == "normalized":
        diff = d_gt - d_sr
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return float(np.sqrt(np.mean(diff * diff)))


def _sample_rmse(sample: RGBDSample, sr_norm: np.ndarray, protocol: str, crop: int) -> float:
    if protocol == "normalized":
        return rmse(sample.depth_hr, sr_norm, protocol, crop)
    return rmse(sample.denormalize(sample.depth_hr), sample.denormalize(sr_norm), protocol, crop)


def default_protocol(dataset: str) -> str:
    return "cm" if is_nyu(dataset) else "range255"


def bicubic_upsample(sample: RGBDSample) -> np.ndarray:
    h, w = sample.hr_shape
    return np.clip(imresize(sample.depth_lr, h, w), 0.0, 1.0)


def evaluate_bicubic(split: DatasetSplit, protocol: Optional[str] = None, crop: int = 0) -> MetricsRecord:
    """Score plain bicubic upsampling of the LR input."""
    if len(split) == 0:
        raise EvaluationError("empty split")
    protocol = protocol or default_protocol(split.name)
    errs = [_sample_rmse(s, bicubic_upsample(s), protocol, crop) for s in split]
    return MetricsRecord(split.name, split[0].scale, errs, float(np.mean(errs)), protocol,
                         variant="bicubic", seed=split.seed)


def evaluate(checkpoint, split: DatasetSplit, scale: Optional[int] = None,
             protocol: Optional[str] = None, source: str = "grn", crop: int = 0,
             seed: int = 0, variant: str = "M-5") -> MetricsRecord:
    """Per-image inference and RMSE aggregation.

    ``source="grn"`` runs the full test-time pipeline (sampled start,
    reverse chain, DSRN); ``"ggn"`` uses stage-1 oracle guidance.
    """
    model = checkpoint.build_model() if isinstance(checkpoint, CheckpointManifest) else checkpoint
    if len(split) == 0:
        raise EvaluationError("empty split")
    scale = scale or split[0].scale
    if scale != model.cfg.scale:
        raise EvaluationError(f"checkpoint trained for x{model.cfg.scale}, asked to evaluate x{scale}")
    protocol = protocol or default_protocol(split.name)
    if not model.cfg.use_guidance:
        source = "none"
    calls_before = model.grn.calls
    errs, times = [], []
    for i, sample in enumerate(split):
        if sample.scale != scale:
            raise EvaluationError(f"sample {sample.id} has scale {sample.scale}, expected {scale}")
        # one generator per image keeps results independent of evaluation order
        gen = torch.Generator().manual_seed(seed * 100003 + i)
        b = to_batch([sample])
        t0 = time.perf_counter()
        sr = model.predict(b.depth_lr, b.color_hr, b.depth_hr, source=source, generator=gen)
        times.append((time.perf_counter() - t0) * 1000.0)
        sr = sr[0].permute(1, 2, 0).numpy()
        errs.append(_sample_rmse(sample, sr, protocol, crop))
    return MetricsRecord(
        dataset=split.name, scale=scale, per_image_rmse=errs, avg_rmse=float(np.mean(errs)),
        unit=protocol, variant=variant,
        param_count=count_params(model.inference_modules(source)),
        ms_per_image=float(np.median(times)), seed=seed,
        diffusion_calls=model.grn.calls - calls_before,
    )


def error_map_levels(err: np.ndarray) -> np.ndarray:
    """Map absolute errors to 8-bit grey: the 99th percentile (or the max, if that is 0) maps to 255."""
    err = np.abs(np.asarray(err, dtype=np.float64))
    ref = np.percentile(err, 99)
    if ref <= 0:
        ref = err.max()
    if ref <= 0:
        return np.zeros(err.shape, dtype=np.uint8)
    return np.clip(np.rint(err / ref * 255.0), 0, 255).astype(np.uint8)


def _gray(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x).squeeze()
    if x.ndim != 2:
        raise ValueError(f"expected a single-channel map, got shape {x.shape}")
    return x


def render_error_map(d_gt, d_sr, out, sr_out=None, zoom: int = 1) -> tuple:
    """Write the error image to ``out`` and the SR depth (8-bit, GT-ranged) next to it."""
    d_gt, d_sr = _gray(d_gt), _gray(d_sr)
    if d_gt.shape != d_sr.shape:
        raise ValueError(f"shape mismatch: {d_gt.shape} vs {d_sr.shape}")
    out = Path(out)
    if sr_out is None:
        stem = out.stem[:-4] if out.stem.endswith("_err") else out.stem
        sr_out = out.with_name(f"{stem}_sr{out.suffix}")
    levels = error_map_levels(d_gt - d_sr)
    lo, hi = float(d_gt.min()), float(d_gt.max())
    span = hi - lo if hi > lo else 1.0
    sr_img = np.clip(np.rint((d_sr - lo) / span * 255.0), 0, 255).astype(np.uint8)
    if zoom > 1:
        levels = np.kron(levels, np.ones((zoom, zoom), dtype=np.uint8))
        sr_img = np.kron(sr_img, np.ones((zoom, zoom), dtype=np.uint8))
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(levels, mode="L").save(out)
        Image.fromarray(sr_img, mode="L").save(sr_out)
    except OSError as err:
        raise EvaluationError(f"cannot write error map to {out}: {err}") from None
    return out, Path(sr_out)


def render_split(model: DSRDiff, split: DatasetSplit, out_dir, source="grn", seed=0) -> list:
    """Write ``<out>/<dataset>/<id>_{sr,err}.png`` for every sample."""
    written = []
    for i, sample in enumerate(split):
        gen = torch.Generator().manual_seed(seed * 100003 + i)
        b = to_batch([sample])
        sr = model.predict(b.depth_lr, b.color_hr, b.depth_hr, source=source, generator=gen)
        err_path = Path(out_dir) / split.name / f"{sample.id}_err.png"
        written.append(render_error_map(sample.depth_hr, sr[0, 0].numpy(), err_path))
    return written


def profile(checkpoint, input_size=(256, 256), runs: int = 20, source: str = "grn",
            warmup: int = 3) -> tuple:
    """``(param_count, median ms per image)`` for test-time inference at ``input_size`` (HR)."""
    model = checkpoint.build_model() if isinstance(checkpoint, CheckpointManifest) else checkpoint
    if not model.cfg.use_guidance:
        source = "none"
    h, w = input_size
    s = model.cfg.scale
    if h % s or w % s:
        raise ValueError(f"input size {h}x{w} not divisible by scale {s}")
    gen = torch.Generator().manual_seed(0)
    depth_lr = torch.rand(1, 1, h // s, w // s, generator=gen)
    color = torch.rand(1, 3, h, w, generator=gen)
    depth_hr = torch.rand(1, 1, h, w, generator=gen)
    for _ in range(warmup):
        model.predict(depth_lr, color, depth_hr, source=source, generator=gen)
    times = []
    for _ in range(max(runs, 20)):
        t0 = time.perf_counter()
        model.predict(depth_lr, color, depth_hr, source=source, generator=gen)
        times.append((time.perf_counter() - t0) * 1000.0)
    return count_params(model.inference_modules(source)), float(statistics.median(times))


def variant_config(variant: str, base: ModelConfig) -> ModelConfig:
    if variant == "M-1":
        return dataclasses.replace(base, use_guidance=False)
    if variant == "M-2":
        return dataclasses.replace(base, compress="global")
    if variant == "M-4":
        return dataclasses.replace(base, fusion="concat")
    if variant in ("M-3", "M-5"):
        return base
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")


def run_ablation(variants: Iterable[str], data: DatasetSplit, cfg: TrainConfig,
                 model_cfg: ModelConfig, eval_split: Optional[DatasetSplit] = None,
                 protocol: Optional[str] = None, stage2_cfg: Optional[TrainConfig] = None,
                 csv_path=None) -> list:
    """Train and score each requested variant under identical settings.

    ``M-1`` drops the guidance, ``M-2`` swaps block compression for global
    pooling, ``M-3`` scores the stage-1 model with its own guidance, ``M-4``
    fuses by concatenation, ``M-5`` is the full model. ``M-3`` and ``M-5``
    share the stage-1 weights.
    """
    variants = list(variants)
    for v in variants:
        variant_config(v, model_cfg)
    eval_split = eval_split if eval_split is not None else data
    s1_cfg = dataclasses.replace(cfg, stage=1)
    s2_cfg = stage2_cfg or dataclasses.replace(cfg, stage=2)
    stage1_cache = {}

    def stage1(mcfg):
        key = (mcfg.use_guidance, mcfg.compress, mcfg.fusion)
        if key not in stage1_cache:
            stage1_cache[key] = train_stage1(data, s1_cfg, mcfg)
        return stage1_cache[key]

    records = []
    for v in variants:
        mcfg = variant_config(v, model_cfg)
        ck1 = stage1(mcfg)
        if v == "M-1":
            rec = evaluate(ck1, eval_split, protocol=protocol, source="none", seed=cfg.seed, variant=v)
        elif v == "M-3":
            rec = evaluate(ck1, eval_split, protocol=protocol, source="ggn", seed=cfg.seed, variant=v)
        else:
            ck2 = train_stage2(data, s2_cfg, ck1)
            rec = evaluate(ck2, eval_split, protocol=protocol, source="grn", seed=cfg.seed, variant=v)
        records.append(rec)
    if csv_path is not None:
        write_metrics_csv(csv_path, records)
    return records


def write_metrics_csv(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())
    return path
