"""Two-stage optimization of the guidance networks and the restoration network."""
import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .data import DatasetSplit, RGBDSample, extract_patches
from .diffusion import GRN, forward_diffuse, recover_guidance
from .dsrn import DSRN
from .guidance import GuidanceVector
from .model import CheckpointManifest, DSRDiff

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "step", "loss", "loss_guidance_term", "lr", "wall_time_s")


class TrainingDiverged(RuntimeError):
    pass


def loss_img(d_gt: torch.Tensor, d_sr: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between ground-truth and reconstructed depth."""
    if d_gt.shape != d_sr.shape:
        raise ValueError(f"shape mismatch: {tuple(d_gt.shape)} vs {tuple(d_sr.shape)}")
    return (d_gt - d_sr).abs().mean()


def guidance_l1(g: GuidanceVector, g0_hat: GuidanceVector) -> torch.Tensor:
    if g.values.shape != g0_hat.values.shape:
        raise ValueError(f"guidance shapes differ: {tuple(g.values.shape)} vs {tuple(g0_hat.values.shape)}")
    # stage-1 guidance is a fixed target
    return (g.values.detach() - g0_hat.values).abs().mean()


def loss_com(g: GuidanceVector, g0_hat: GuidanceVector, d_gt, d_sr) -> torch.Tensor:
    return guidance_l1(g, g0_hat) + loss_img(d_gt, d_sr)


@dataclass
class Batch:
    depth_lr: torch.Tensor
    depth_hr: torch.Tensor
    color_hr: torch.Tensor


def to_batch(samples: Sequence[RGBDSample], dtype=torch.float32) -> Batch:
    def stack(attr):
        arr = np.stack([getattr(s, attr) for s in samples]).transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)

    return Batch(stack("depth_lr"), stack("depth_hr"), stack("color_hr"))


def training_items(data, cfg: TrainConfig) -> list:
    samples = list(data)
    if cfg.patch_hr is None:
        return samples
    split = data if isinstance(data, DatasetSplit) else DatasetSplit(samples, "synthetic", cfg.seed)
    if all(s.hr_shape == (cfg.patch_hr, cfg.patch_hr) for s in samples) and cfg.patches_per_image == 1:
        return samples
    return extract_patches(split, cfg.patch_hr, cfg.seed, cfg.patches_per_image)


def iterate_batches(items, cfg: TrainConfig, epoch: int):
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(items))
    for i in range(0, len(order), cfg.batch_size):
        yield to_batch([items[j] for j in order[i:i + cfg.batch_size]])


def stage1_forward(model: DSRDiff, batch: Batch):
    g = model.guidance(batch.depth_lr, batch.depth_hr, batch.color_hr)
    return g, model.dsrn(batch.depth_lr, batch.color_hr, g)


def stage2_forward(model: DSRDiff, batch: Batch, generator=None, eps=None,
                   noise_fn: Optional[Callable] = None):
    """Frozen GGN target, diffuse to ``G_T``, reverse-recover, reconstruct."""
    with torch.no_grad():
        g = model.guidance(batch.depth_lr, batch.depth_hr, batch.color_hr)
    if g is None:
        return None, None, model.dsrn(batch.depth_lr, batch.color_hr, None)
    g_T = forward_diffuse(g, model.schedule, model.schedule.T, eps=eps, generator=generator)
    g0 = recover_guidance(batch.depth_lr, model.schedule, model.grn, g_T, noise_fn=noise_fn)
    return g, g0, model.dsrn(batch.depth_lr, batch.color_hr, g0)


def loss_for_epoch(cfg: TrainConfig, epoch: int) -> str:
    """Which objective stage 2 optimizes at ``epoch``."""
    if cfg.stage == 2 and epoch < cfg.loss_switch_epoch:
        return "com"
    return "img"


def _check_finite(loss, epoch, step, history):
    if not math.isfinite(loss):
        recent = [round(r["loss"], 6) for r in history[-5:]]
        raise TrainingDiverged(
            f"non-finite loss at epoch {epoch}, step {step}; recent losses {recent}"
        )


def _optimizer(params, cfg: TrainConfig):
    return torch.optim.Adam(
        params, lr=cfg.lr_init, betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
    )


def _run(model, params, step_fn, items, cfg: TrainConfig, history_path=None):
    opt = _optimizer(params, cfg)
    history = []
    step = 0
    start = time.perf_counter()
    epoch = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        for batch in iterate_batches(items, cfg, epoch):
            loss, g_term = step_fn(batch, epoch)
            value = float(loss.detach())
            _check_finite(value, epoch, step, history)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            history.append({
                "epoch": epoch, "step": step, "loss": value,
                "loss_guidance_term": g_term, "lr": lr,
                "wall_time_s": time.perf_counter() - start,
            })
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if history_path is not None:
        write_history(history_path, history)
    return history, epoch


def write_history(path, history) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        w.writerows(history)


def build_model(model_cfg: ModelConfig, seed: int) -> DSRDiff:
    torch.manual_seed(seed)
    return DSRDiff(model_cfg)


def train_stage1(data, cfg: TrainConfig, model_cfg: ModelConfig,
                 model: Optional[DSRDiff] = None, history_path=None) -> CheckpointManifest:
    """Train GGN and DSRN jointly with the image L1 loss."""
    if cfg.stage != 1:
        raise ValueError("train_stage1 requires cfg.stage == 1")
    model = model or build_model(model_cfg, cfg.seed)
    model.train()
    items = training_items(data, cfg)
    params = list(model.dsrn.parameters())
    if model.cfg.use_guidance:
        params += list(model.ggn.parameters())

    def step(batch, epoch):
        _, d_sr = stage1_forward(model, batch)
        return loss_img(batch.depth_hr, d_sr), 0.0

    history, epoch = _run(model, params, step, items, cfg, history_path)
    log.info("stage 1 done: %d steps, final loss %.5f", len(history), history[-1]["loss"])
    return CheckpointManifest.from_model(model, cfg, epoch + 1, 1, history)


def train_stage2(data, cfg: TrainConfig, stage1: CheckpointManifest,
                 history_path=None) -> CheckpointManifest:
    """Train GRN with DSRN on recovered guidance; GGN stays frozen."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 requires cfg.stage == 2")
    if stage1 is None or not any(k.startswith("ggn.") for k in stage1.arrays):
        raise ValueError("stage-1 checkpoint with trained GGN and DSRN is required")
    model = stage1.build_model()
    torch.manual_seed(cfg.seed + 1)
    c = model.cfg
    model.grn = GRN(c.channels, c.scale, c.K, c.T, c.n_res, c.hidden, c.compress)
    if not cfg.warm_start:
        model.dsrn = DSRN(c)
    model.train()
    model.ggn.requires_grad_(False)
    items = training_items(data, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = list(model.grn.parameters()) + list(model.dsrn.parameters())

    def step(batch, epoch):
        g, g0, d_sr = stage2_forward(model, batch, generator=gen)
        if g is None:
            return loss_img(batch.depth_hr, d_sr), 0.0
        g_term = guidance_l1(g, g0)
        if loss_for_epoch(cfg, epoch) == "com":
            return g_term + loss_img(batch.depth_hr, d_sr), float(g_term.detach())
        return loss_img(batch.depth_hr, d_sr), float(g_term.detach())

    history, epoch = _run(model, params, step, items, cfg, history_path)
    log.info("stage 2 done: %d steps, final loss %.5f", len(history), history[-1]["loss"])
    return CheckpointManifest.from_model(model, cfg, epoch + 1, 2, history)
