"""The assembled model (GGN, GRN, DSRN) and its checkpoint container."""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from . import config as config_mod
from .config import ModelConfig, TrainConfig
from .diffusion import GRN, NoiseSchedule, build_schedule, recover_guidance, sample_start
from .dsrn import DSRN
from .guidance import GGN, GuidanceVector

CHECKPOINT_VERSION = 1
PARTS = ("ggn", "grn", "dsrn")


class CheckpointError(Exception):
    pass


class DSRDiff(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.schedule = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.ggn = GGN(cfg.channels, cfg.scale, cfg.n_res, cfg.K, compress=cfg.compress,
                       bound=cfg.guidance_bound)
        self.grn = GRN(cfg.channels, cfg.scale, cfg.K, cfg.T, cfg.n_res, cfg.hidden, cfg.compress)
        self.dsrn = DSRN(cfg)

    def guidance(self, depth_lr, depth_hr, color_hr) -> Optional[GuidanceVector]:
        if not self.cfg.use_guidance:
            return None
        return self.ggn(depth_lr, depth_hr, color_hr)

    def recover(self, depth_lr, generator=None) -> Optional[GuidanceVector]:
        """Estimate guidance from the LR depth alone, starting from sampled noise."""
        if not self.cfg.use_guidance:
            return None
        g_T = sample_start((depth_lr.shape[0], self.cfg.guidance_dim), self.schedule,
                           self.cfg.K, self.cfg.channels, generator, depth_lr.dtype)
        return recover_guidance(depth_lr, self.schedule, self.grn, g_T)

    @torch.no_grad()
    def predict(self, depth_lr, color_hr, depth_hr=None, source="grn", generator=None):
        """Inference in eval mode. ``source`` is ``"grn"``, ``"ggn"`` or ``"none"``."""
        was_training = self.training
        self.eval()
        try:
            if source == "grn":
                g = self.recover(depth_lr, generator)
            elif source == "ggn":
                g = self.guidance(depth_lr, depth_hr, color_hr)
            elif source == "none":
                if self.cfg.use_guidance:
                    raise ValueError("source 'none' needs a model trained without guidance")
                g = None
            else:
                raise ValueError(f"unknown guidance source {source!r}")
            return self.dsrn(depth_lr, color_hr, g)
        finally:
            self.train(was_training)

    def inference_modules(self, source: str = "grn"):
        """Modules needed at test time for a given guidance source."""
        if not self.cfg.use_guidance or source == "none":
            return [self.dsrn]
        return [self.dsrn, self.grn if source == "grn" else self.ggn]


def count_params(modules) -> int:
    if isinstance(modules, nn.Module):
        modules = [modules]
    return sum(p.numel() for m in modules for p in m.parameters())


@dataclass
class CheckpointManifest:
    arrays: dict
    model_cfg: dict
    train_cfg: dict
    schedule: dict
    epoch: int = 0
    stage: int = 1
    history: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: DSRDiff, train_cfg: Optional[TrainConfig], epoch: int,
                   stage: int, history=None) -> "CheckpointManifest":
        arrays = {}
        for part in PARTS:
            for k, v in getattr(model, part).state_dict().items():
                arrays[f"{part}.{k}"] = v.detach().cpu().numpy().copy()
        sched = model.schedule
        return cls(
            arrays=arrays,
            model_cfg=config_mod.to_dict(model.cfg)["model"],
            train_cfg=config_mod.to_dict(model.cfg, train_cfg)["train"] if train_cfg else {},
            schedule={"T": sched.T, "beta": sched.beta.tolist()},
            epoch=epoch,
            stage=stage,
            history=list(history or []),
        )

    def build_model(self) -> DSRDiff:
        model = DSRDiff(config_mod.model_from_dict(self.model_cfg))
        for part in PARTS:
            module = getattr(model, part)
            state = {}
            for k, ref in module.state_dict().items():
                name = f"{part}.{k}"
                if name not in self.arrays:
                    raise CheckpointError(f"checkpoint is missing array {name!r}")
                arr = self.arrays[name]
                if tuple(arr.shape) != tuple(ref.shape):
                    raise CheckpointError(f"array {name!r} has shape {arr.shape}, expected {tuple(ref.shape)}")
                state[k] = torch.from_numpy(np.array(arr))
            module.load_state_dict(state)
        return model

    def meta(self) -> dict:
        return {
            "version": self.version,
            "model_cfg": self.model_cfg,
            "train_cfg": self.train_cfg,
            "schedule": self.schedule,
            "epoch": self.epoch,
            "stage": self.stage,
            "history": self.history,
            "arrays": sorted(self.arrays),
        }


def save_checkpoint(manifest: CheckpointManifest, path) -> Path:
    """Write arrays plus a JSON manifest into a single ``.npz`` container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = np.frombuffer(json.dumps(manifest.meta()).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=meta, **manifest.arrays)
    return path


def load_checkpoint(path) -> CheckpointManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            files = {k: z[k] for k in z.files}
    except (OSError, ValueError) as err:
        raise CheckpointError(f"corrupt checkpoint {path}: {err}") from None
    if "__manifest__" not in files:
        raise CheckpointError(f"corrupt checkpoint {path}: no manifest")
    try:
        meta = json.loads(files.pop("__manifest__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint manifest in {path}: {err}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    for name in meta["arrays"]:
        if name not in files:
            raise CheckpointError(f"checkpoint is missing array {name!r}")
    return CheckpointManifest(
        arrays=files,
        model_cfg=meta["model_cfg"],
        train_cfg=meta["train_cfg"],
        schedule=meta["schedule"],
        epoch=meta["epoch"],
        stage=meta["stage"],
        history=meta["history"],
        version=meta["version"],
    )
