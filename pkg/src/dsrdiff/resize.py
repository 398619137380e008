"""Separable bicubic resampling (Keys kernel, a = -0.5) with antialiasing.

Resampling is expressed as a pair of dense weight matrices so the same weights
serve both the numpy degradation path and the differentiable torch path.
"""
from functools import lru_cache

import numpy as np
import torch

CUBIC_A = -0.5


def cubic_kernel(x, a=CUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=256)
def _weights(in_size: int, out_size: int) -> np.ndarray:
    scale = out_size / in_size
    # widen the kernel when shrinking (antialiasing)
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    w = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        center = (i + 0.5) / scale - 0.5
        lo = max(int(np.floor(center - support)), 0)
        hi = min(int(np.ceil(center + support)), in_size - 1)
        taps = np.arange(lo, hi + 1)
        k = cubic_kernel((taps - center) * stretch)
        w[i, lo:hi + 1] = k / k.sum()
    w.setflags(write=False)
    return w


def resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic ``(out_size, in_size)`` matrix for 1-D bicubic resampling.

    Taps falling outside the signal are dropped and the remaining weights
    renormalized, so constants are reproduced exactly.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError(f"sizes must be positive, got {in_size} -> {out_size}")
    return _weights(int(in_size), int(out_size))


def imresize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bicubic resize of an ``H x W`` or ``H x W x C`` array (float64 accumulation)."""
    x = np.asarray(x)
    wh = resize_weights(x.shape[0], out_h)
    ww = resize_weights(x.shape[1], out_w)
    if x.ndim == 2:
        out = wh @ x.astype(np.float64) @ ww.T
    else:
        out = np.einsum("ih,hwc,jw->ijc", wh, x.astype(np.float64), ww)
    return out.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def imresize_torch(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bicubic resize of an ``N x C x H x W`` tensor; differentiable in ``x``."""
    wh = torch.tensor(resize_weights(x.shape[-2], out_h), dtype=x.dtype, device=x.device)
    ww = torch.tensor(resize_weights(x.shape[-1], out_w), dtype=x.dtype, device=x.device)
    return wh @ x @ ww.T
