"""Guidance generation: pixel-unshuffle alignment, GGN, and K x K block compression.

Tensors are ``N x C x H x W``. A guidance vector is ``N x (K*K*C)`` ordered
channel-major, then row-major over blocks.
"""
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class GuidanceVector:
    """Compact guidance ``G`` (or a point ``G_t`` on its diffusion trajectory)."""

    values: torch.Tensor  # (..., K*K*C)
    K: int
    C: int
    t: int = 0

    def __post_init__(self):
        if self.values.shape[-1] != self.K * self.K * self.C:
            raise ValueError(
                f"guidance length {self.values.shape[-1]} != K^2*C = {self.K * self.K * self.C}"
            )
        if self.t < 0:
            raise ValueError(f"diffusion index must be >= 0, got {self.t}")

    def with_values(self, values: torch.Tensor, t: int) -> "GuidanceVector":
        return GuidanceVector(values, self.K, self.C, t)

    def as_grid(self) -> torch.Tensor:
        """Reshape to ``N x C x K x K``."""
        return self.values.reshape(-1, self.C, self.K, self.K)


def pixel_unshuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Space-to-channel: ``N x c x H x W -> N x c*s^2 x H/s x W/s``.

    Output channel ``ci*s*s + i*s + j`` holds ``x[ci, i::s, j::s]``.
    """
    h, w = x.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"spatial size {h}x{w} not divisible by {s}")
    return F.pixel_unshuffle(x, s)


def pixel_shuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    return F.pixel_shuffle(x, s)


def block_bounds(n: int, K: int) -> list:
    # round-half-up so partitions are symmetric and independent of banker's rounding
    return [int((i * n) / K + 0.5) for i in range(K + 1)]


def compress_guidance(feat: torch.Tensor, K: int) -> torch.Tensor:
    """Mean over a K x K grid of near-equal blocks, per channel.

    ``N x C x H x W -> N x (K*K*C)``; block edges at ``round(i*H/K)``.
    """
    h, w = feat.shape[-2:]
    if K > h or K > w:
        raise ValueError(f"K={K} exceeds feature size {h}x{w}")
    rows, cols = block_bounds(h, K), block_bounds(w, K)
    cells = [
        feat[..., rows[i]:rows[i + 1], cols[j]:cols[j + 1]].mean(dim=(-2, -1))
        for i in range(K)
        for j in range(K)
    ]
    return torch.stack(cells, dim=-1).flatten(start_dim=-2)


def global_pool_guidance(feat: torch.Tensor, K: int) -> torch.Tensor:
    """Plain global average pooling broadcast to the K*K slots of each channel."""
    pooled = feat.mean(dim=(-2, -1))[..., None]
    return pooled.expand(*pooled.shape[:-1], K * K).flatten(start_dim=-2)


def block_upsample(grid: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Nearest upsampling of ``N x C x K x K`` cells onto the same blocks used for compression."""
    K = grid.shape[-1]
    if K > h or K > w:
        raise ValueError(f"K={K} exceeds feature size {h}x{w}")
    rows, cols = block_bounds(h, K), block_bounds(w, K)
    row_idx = torch.cat([torch.full((rows[i + 1] - rows[i],), i) for i in range(K)])
    col_idx = torch.cat([torch.full((cols[j + 1] - cols[j],), j) for j in range(K)])
    row_idx, col_idx = row_idx.to(grid.device), col_idx.to(grid.device)
    return grid[..., row_idx, :][..., col_idx]


class ResBlock(nn.Module):
    """conv3x3 -> ReLU -> conv3x3, with identity skip."""

    def __init__(self, channels: int, bias: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=bias)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=bias)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class GGN(nn.Module):
    """Guidance generator.

    With ``conditional=False`` (stage 1) the inputs are HR depth, HR color and
    LR depth; both HR maps are pixel-unshuffled to LR resolution and
    concatenated with the LR depth (``4*s^2 + 1`` channels). With
    ``conditional=True`` the network sees the LR depth alone; this is the
    condition encoder of the diffusion prior.
    """

    def __init__(self, channels: int, scale: int, n_res: int = 4, K: int = 2,
                 conditional: bool = False, compress: str = "block", bias: bool = True,
                 bound: str = "none"):
        super().__init__()
        if bound not in ("none", "tanh", "layernorm"):
            raise ValueError(f"unknown guidance bound {bound!r}")
        self.bound = bound
        self.scale, self.K, self.channels = scale, K, channels
        self.conditional = conditional
        self.compress = compress
        in_ch = 1 if conditional else 4 * scale * scale + 1
        self.head = nn.Conv2d(in_ch, channels, 3, padding=1, bias=bias)
        self.body = nn.Sequential(*[ResBlock(channels, bias) for _ in range(n_res)])
        self.tail = nn.Conv2d(channels, channels, 1, bias=bias)

    def features(self, depth_lr, depth_hr=None, color_hr=None):
        s = self.scale
        if self.conditional:
            x = depth_lr
        else:
            if depth_hr is None or color_hr is None:
                raise ValueError("stage-1 GGN needs HR depth and HR color")
            if depth_hr.shape[-2:] != color_hr.shape[-2:]:
                raise ValueError("HR depth and color differ in size")
            if tuple(depth_hr.shape[-2:]) != (depth_lr.shape[-2] * s, depth_lr.shape[-1] * s):
                raise ValueError(
                    f"HR size {tuple(depth_hr.shape[-2:])} inconsistent with LR "
                    f"{tuple(depth_lr.shape[-2:])} at scale {s}"
                )
            x = torch.cat([pixel_unshuffle(depth_hr, s), pixel_unshuffle(color_hr, s), depth_lr], dim=1)
        return self.tail(self.body(self.head(x)))

    def forward(self, depth_lr, depth_hr=None, color_hr=None) -> GuidanceVector:
        feat = self.features(depth_lr, depth_hr, color_hr)
        pool = compress_guidance if self.compress == "block" else global_pool_guidance
        g = pool(feat, self.K)
        if self.bound == "tanh":
            g = torch.tanh(g)
        elif self.bound == "layernorm":
            g = F.layer_norm(g, g.shape[-1:])
        return GuidanceVector(g, self.K, self.channels, 0)


def ggn_forward(depth_hr, color_hr, depth_lr, params: GGN, s: Optional[int] = None):
    """Uncompressed GGN feature map ``N x C x H/s x W/s``."""
    if s is not None and s != params.scale:
        raise ValueError(f"GGN built for scale {params.scale}, called with {s}")
    return params.features(depth_lr, depth_hr, color_hr)
