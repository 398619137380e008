"""Depth super-resolution network conditioned on the compact guidance."""
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .config import ModelConfig
from .guidance import GuidanceVector, ResBlock, block_upsample
from .resize import imresize_torch


class LayerNorm2d(nn.Module):
    """LayerNorm over channels at every pixel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class GuidanceInjection(nn.Module):
    """``conv1x1(up(reshape(G))) + LN(F)``; without a conv, just ``LN(F)``."""

    def __init__(self, channels: int, use_guidance: bool = True):
        super().__init__()
        self.norm = LayerNorm2d(channels)
        self.conv = nn.Conv2d(channels, channels, 1) if use_guidance else None

    def forward(self, f, g: Optional[GuidanceVector]):
        out = self.norm(f)
        if self.conv is None:
            return out
        if g is None:
            raise ValueError("guidance required by this injection site")
        if g.C != f.shape[1]:
            raise ValueError(f"guidance has {g.C} channels, feature has {f.shape[1]}")
        grid = g.as_grid().to(f.dtype)
        return out + self.conv(block_upsample(grid, f.shape[-2], f.shape[-1]))


def inject_guidance(f_in, g: GuidanceVector, site: GuidanceInjection):
    return site(f_in, g)


class ChannelAttention(nn.Module):
    """Transposed multi-head self-attention: heads attend across channels."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.qkv_dw = nn.Conv2d(channels * 3, channels * 3, 3, padding=1, groups=channels * 3)
        self.project_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q, k, v = (rearrange(a, "b (head c) h w -> b head c (h w)", head=self.heads) for a in (q, k, v))
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = ((q @ k.transpose(-2, -1)) * self.temperature).softmax(dim=-1)
        out = rearrange(attn @ v, "b head c (h w) -> b (head c) h w", h=h, w=w)
        return self.project_out(out)


class GatedFeedForward(nn.Module):
    def __init__(self, channels: int, expansion: float = 2.66):
        super().__init__()
        hidden = int(channels * expansion)
        self.project_in = nn.Conv2d(channels, hidden * 2, 1)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2)
        self.project_out = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class DFEBlock(nn.Module):
    """Transformer-style depth block with guidance injected before attention."""

    def __init__(self, channels: int, heads: int, expansion: float = 2.66, use_guidance: bool = True):
        super().__init__()
        self.inject = GuidanceInjection(channels, use_guidance)
        self.attn = ChannelAttention(channels, heads)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = GatedFeedForward(channels, expansion)

    def forward(self, x, g=None):
        x = x + self.attn(self.inject(x, g))
        return x + self.ffn(self.norm2(x))


class ESA(nn.Module):
    """Enhanced spatial attention: a sigmoid gate computed on a reduced branch."""

    def __init__(self, channels: int):
        super().__init__()
        if channels < 4:
            raise ValueError(f"ESA needs at least 4 channels, got {channels}")
        f = channels // 4
        self.conv1 = nn.Conv2d(channels, f, 1)
        self.conv_f = nn.Conv2d(f, f, 1)
        self.conv2 = nn.Conv2d(f, f, 3, stride=2, padding=1)
        self.conv_max = nn.Conv2d(f, f, 3, padding=1)
        self.conv3 = nn.Conv2d(f, f, 3, padding=1)
        self.conv3_ = nn.Conv2d(f, f, 3, padding=1)
        self.conv4 = nn.Conv2d(f, channels, 1)

    def forward(self, x):
        c1_ = self.conv1(x)
        c1 = self.conv2(c1_)
        # padding keeps the pool valid on the small maps of a toy model
        v_max = F.max_pool2d(c1, kernel_size=7, stride=3, padding=3)
        v_range = F.relu(self.conv_max(v_max))
        c3 = F.relu(self.conv3(v_range))
        c3 = self.conv3_(c3)
        c3 = F.interpolate(c3, size=x.shape[-2:], mode="bilinear", align_corners=False)
        gate = torch.sigmoid(self.conv4(c3 + self.conv_f(c1_)))
        return x * gate


class CFEBlock(nn.Module):
    """Pixel-attention color block on a half-width bottleneck."""

    def __init__(self, channels: int):
        super().__init__()
        mid = max(channels // 2, 1)
        self.conv_in = nn.Conv2d(channels, mid, 3, padding=1)
        self.attn = nn.Conv2d(channels, mid, 1)
        self.conv_out = nn.Conv2d(mid, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv_out(self.conv_in(x) * torch.sigmoid(self.attn(x)))


class DFEGroup(nn.Module):
    def __init__(self, channels, n_blocks, heads, expansion=2.66, use_guidance=True):
        super().__init__()
        self.blocks = nn.ModuleList(
            DFEBlock(channels, heads, expansion, use_guidance) for _ in range(n_blocks)
        )
        self.esa = ESA(channels)

    def forward(self, x, g=None):
        for blk in self.blocks:
            x = blk(x, g)
        return self.esa(x)


class CFEGroup(nn.Module):
    def __init__(self, channels, n_blocks):
        super().__init__()
        self.blocks = nn.Sequential(*[CFEBlock(channels) for _ in range(n_blocks)])
        self.esa = ESA(channels)

    def forward(self, x):
        return self.esa(self.blocks(x))


def _pixel_center_grid(n, h, w, offset=None, dtype=torch.float32, device=None):
    ys = (2.0 * (torch.arange(h, dtype=dtype, device=device) + 0.5) / h) - 1.0
    xs = (2.0 * (torch.arange(w, dtype=dtype, device=device) + 0.5) / w) - 1.0
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    grid = torch.stack([gx, gy], dim=-1).expand(n, h, w, 2)
    if offset is not None:
        grid = grid + offset.permute(0, 2, 3, 1)
    return grid


def grid_resample(f, h: int, w: int, offset=None):
    """Bilinear sampling at output pixel centers (align-corners-false, border padding)."""
    grid = _pixel_center_grid(f.shape[0], h, w, offset, f.dtype, f.device)
    return F.grid_sample(f, grid, mode="bilinear", padding_mode="border", align_corners=False)


def grid_upsample(f, target_h: int, target_w: int):
    if target_h < f.shape[-2] or target_w < f.shape[-1]:
        raise ValueError(
            f"grid_upsample cannot shrink {tuple(f.shape[-2:])} to {(target_h, target_w)}"
        )
    return grid_resample(f, target_h, target_w)


class FFM(nn.Module):
    """Fuse grid-upsampled depth features with convolved color features, then refine."""

    def __init__(self, channels: int, fusion: str = "mul", learned_offsets: bool = False):
        super().__init__()
        self.fusion = fusion
        self.color_conv = nn.Conv2d(channels, channels, 3, padding=1)
        if fusion == "concat":
            self.merge = nn.Conv2d(2 * channels, channels, 1)
        self.offset = None
        if learned_offsets:
            self.offset = nn.Conv2d(channels, 2, 3, padding=1)
            nn.init.zeros_(self.offset.weight)
            nn.init.zeros_(self.offset.bias)
        self.refine = nn.Sequential(ResBlock(channels), ResBlock(channels))

    def forward(self, f_depth, f_color, target_h, target_w):
        if f_depth.shape[1] != f_color.shape[1]:
            raise ValueError(f"channel mismatch: {f_depth.shape[1]} vs {f_color.shape[1]}")
        color = self.color_conv(grid_resample(f_color, target_h, target_w))
        offset = self.offset(color) if self.offset is not None else None
        if offset is None and (target_h < f_depth.shape[-2] or target_w < f_depth.shape[-1]):
            raise ValueError("FFM target smaller than depth features")
        depth = grid_resample(f_depth, target_h, target_w, offset)
        if self.fusion == "mul":
            fused = depth * color
        else:
            fused = self.merge(torch.cat([depth, color], dim=1))
        return self.refine(fused)


def ffm_fuse(f_depth, f_color, target_h, target_w, params: FFM):
    return params(f_depth, f_color, target_h, target_w)


class DSRN(nn.Module):
    """Depth path (two DFE groups) + color path (CFE group) + two FFMs + reconstruction."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.scale = cfg.scale
        self.depth_stem = nn.Conv2d(1, c, 3, padding=1)
        self.dfe1 = DFEGroup(c, cfg.n_dfe, cfg.heads, cfg.ffn_expansion, cfg.use_guidance)
        self.dfe2 = DFEGroup(c, cfg.n_dfe, cfg.heads, cfg.ffn_expansion, cfg.use_guidance)
        self.color_stem = nn.Conv2d(3, c, 3, padding=1)
        self.cfe = CFEGroup(c, cfg.n_cfe)
        self.ffm1 = FFM(c, cfg.fusion, cfg.learned_offsets)
        self.ffm2 = FFM(c, cfg.fusion, cfg.learned_offsets)
        self.recon = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, depth_lr, color_hr, g: Optional[GuidanceVector] = None,
                clamp: Optional[bool] = None):
        s = self.scale
        h, w = depth_lr.shape[-2] * s, depth_lr.shape[-1] * s
        if tuple(color_hr.shape[-2:]) != (h, w):
            raise ValueError(
                f"color {tuple(color_hr.shape[-2:])} inconsistent with LR depth "
                f"{tuple(depth_lr.shape[-2:])} at scale {s}"
            )
        if g is not None and g.C != self.cfg.channels:
            raise ValueError(f"guidance channels {g.C} != model channels {self.cfg.channels}")
        if not self.cfg.use_guidance:
            g = None
        fd = self.dfe2(self.dfe1(self.depth_stem(depth_lr), g), g)
        fc = self.cfe(self.color_stem(color_hr))
        x = self.ffm1(fd, fc, h // 2, w // 2)
        x = self.ffm2(x, fc, h, w)
        out = self.recon(x)
        if self.cfg.global_residual:
            out = out + imresize_torch(depth_lr, h, w)
        if clamp is None:
            clamp = not self.training
        return out.clamp(0.0, 1.0) if clamp else out


def dsrn_forward(depth_lr, color_hr, g, params: DSRN, s: Optional[int] = None, clamp=None):
    if s is not None and s != params.scale:
        raise ValueError(f"DSRN built for scale {params.scale}, called with {s}")
    return params(depth_lr, color_hr, g, clamp=clamp)


def identity_init(model: nn.Module) -> nn.Module:
    """Zero-initialize every residual branch so each block becomes the identity.

    DFE output projections, CFE outer convs and resblock second convs are
    zeroed, injection convs are zeroed, ESA gates saturate at 1, FFM color
    convs emit constant ones, and the reconstruction head is zeroed.
    """
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (ChannelAttention, GatedFeedForward)):
                nn.init.zeros_(m.project_out.weight)
                nn.init.zeros_(m.project_out.bias)
            elif isinstance(m, CFEBlock):
                nn.init.zeros_(m.conv_out.weight)
                nn.init.zeros_(m.conv_out.bias)
            elif isinstance(m, ResBlock):
                nn.init.zeros_(m.conv2.weight)
                nn.init.zeros_(m.conv2.bias)
            elif isinstance(m, GuidanceInjection) and m.conv is not None:
                nn.init.zeros_(m.conv.weight)
                nn.init.zeros_(m.conv.bias)
            elif isinstance(m, ESA):
                nn.init.zeros_(m.conv4.weight)
                nn.init.constant_(m.conv4.bias, 1e4)
            elif isinstance(m, FFM):
                nn.init.zeros_(m.color_conv.weight)
                nn.init.ones_(m.color_conv.bias)
            elif isinstance(m, DSRN):
                nn.init.zeros_(m.recon.weight)
                nn.init.zeros_(m.recon.bias)
    return model
