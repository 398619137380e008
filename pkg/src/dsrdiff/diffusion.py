"""Diffusion prior over the compact guidance vector.

Time indices are 1-based (``t = 1..T``); ``t = 0`` denotes the clean guidance.
Schedule arithmetic is float64; results are cast to the tensor's dtype.
"""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .guidance import GGN, GuidanceVector


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray

    def __getitem__(self, name):
        return getattr(self, name)

    def at(self, name: str, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")
        return float(getattr(self, name)[t - 1])


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + np.arange(T, dtype=np.float64) * (beta_end - beta_start) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    arrays = [beta, alpha, alpha_bar, np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar)]
    for a in arrays:
        a.setflags(write=False)
    return NoiseSchedule(T, *arrays)


def forward_diffuse(g0: GuidanceVector, schedule: NoiseSchedule, t: int,
                    eps: Optional[torch.Tensor] = None,
                    generator: Optional[torch.Generator] = None) -> GuidanceVector:
    """Closed-form sample ``G_t = sqrt(abar_t) G + sqrt(1 - abar_t) eps``."""
    if g0.t != 0:
        raise ValueError(f"forward_diffuse expects clean guidance (t=0), got t={g0.t}")
    a = schedule.at("sqrt_alpha_bar", t)
    b = schedule.at("sqrt_one_minus_alpha_bar", t)
    if eps is None:
        eps = torch.randn(g0.values.shape, generator=generator, dtype=g0.values.dtype)
    elif eps.shape != g0.values.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != guidance shape {tuple(g0.values.shape)}")
    return g0.with_values(a * g0.values + b * eps, t)


def reverse_step(g_t: GuidanceVector, eps_hat: torch.Tensor, schedule: NoiseSchedule,
                 t: int) -> GuidanceVector:
    """Deterministic update ``G_{t-1} = (G_t - eps_hat (1-alpha_t)/sqrt(1-abar_t)) / sqrt(alpha_t)``."""
    alpha = schedule.at("alpha", t)
    coef = (1.0 - alpha) / schedule.at("sqrt_one_minus_alpha_bar", t)
    if eps_hat.shape != g_t.values.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != {tuple(g_t.values.shape)}")
    return g_t.with_values((g_t.values - coef * eps_hat) / np.sqrt(alpha), t - 1)


def sample_start(shape, schedule: NoiseSchedule, K: int, C: int,
                 generator: Optional[torch.Generator] = None,
                 dtype=torch.float32) -> GuidanceVector:
    """Inference start of the reverse chain: ``N(0, (1 - abar_T) I)``."""
    std = schedule.at("sqrt_one_minus_alpha_bar", schedule.T)
    return GuidanceVector(std * torch.randn(shape, generator=generator, dtype=dtype), K, C, schedule.T)


class Denoiser(nn.Module):
    """Three-layer MLP on ``[G_t, C_G, onehot(t)]`` predicting the noise."""

    def __init__(self, dim: int, T: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or 4 * dim
        self.dim, self.T = dim, T
        self.net = nn.Sequential(
            nn.Linear(2 * dim + T, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, g_t: torch.Tensor, c_g: torch.Tensor, t: int) -> torch.Tensor:
        emb = F.one_hot(torch.tensor(t - 1), self.T).to(g_t.dtype)
        emb = emb.expand(*g_t.shape[:-1], self.T)
        return self.net(torch.cat([g_t, c_g, emb], dim=-1))


class GRN(nn.Module):
    """Guidance recovery: condition encoder (LR-depth GGN) plus denoiser."""

    def __init__(self, channels: int, scale: int, K: int, T: int, n_res: int = 4,
                 hidden: Optional[int] = None, compress: str = "block"):
        super().__init__()
        self.K, self.C = K, channels
        self.encoder = GGN(channels, scale, n_res, K, conditional=True, compress=compress)
        self.denoiser = Denoiser(K * K * channels, T, hidden)
        self.calls = 0  # reverse chains run, for call tracing


def encode_condition(depth_lr: torch.Tensor, params: GRN) -> GuidanceVector:
    if depth_lr.dim() != 4 or depth_lr.shape[1] != 1:
        raise ValueError(f"LR depth must be N x 1 x h x w, got {tuple(depth_lr.shape)}")
    return params.encoder(depth_lr)


def predict_noise(g_t: GuidanceVector, c_g: GuidanceVector, t: int, params: GRN) -> torch.Tensor:
    if t < 1 or g_t.t != t:
        raise ValueError(f"cannot denoise at t={t} (guidance index {g_t.t})")
    return params.denoiser(g_t.values, c_g.values, t)


def recover_guidance(depth_lr: torch.Tensor, schedule: NoiseSchedule, params: GRN,
                     g_T: GuidanceVector,
                     noise_fn: Optional[Callable] = None) -> GuidanceVector:
    """Run the full reverse chain from ``g_T`` down to the estimated clean guidance.

    ``noise_fn(g_t, c_g, t)`` overrides the learned denoiser (oracle tests).
    """
    if g_T.t != schedule.T:
        raise ValueError(f"reverse chain must start at t={schedule.T}, got {g_T.t}")
    params.calls += 1
    c_g = encode_condition(depth_lr, params)
    g = g_T
    for t in range(schedule.T, 0, -1):
        eps_hat = noise_fn(g, c_g, t) if noise_fn else predict_noise(g, c_g, t, params)
        g = reverse_step(g, eps_hat, schedule, t)
    return g
