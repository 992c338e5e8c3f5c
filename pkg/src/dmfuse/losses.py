"""Stage II objective: intensity, std-selected SSIM and Sobel-gradient terms.

All functions accept torch tensors (differentiable, any leading batch dims
ending in ``H x W``) or numpy arrays (returned as Python floats).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from .config import DEFAULT_ALPHA, DEFAULT_BETA
from .imaging import sobel_gradient

C1 = 0.01 ** 2
C2 = 0.03 ** 2

Number = Union[float, torch.Tensor]


def _tensors(*arrays):
    numpy_in = not any(isinstance(a, torch.Tensor) for a in arrays)
    out = [a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=np.float64))
           for a in arrays]
    shape = out[0].shape
    for other in out[1:]:
        if other.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(other.shape)}")
    return out, numpy_in


def _detach(value):
    return value.detach() if isinstance(value, torch.Tensor) else value


def _result(value: torch.Tensor, numpy_in: bool) -> Number:
    return float(value) if numpy_in else value


def intensity_loss(fused, a, b) -> Number:
    """Mean ``|F - max(A, B)|``."""
    (f, a, b), numpy_in = _tensors(fused, a, b)
    return _result((f - torch.maximum(a, b)).abs().mean(), numpy_in)


def gradient_loss(fused, a, b) -> Number:
    """Mean ``| |grad F| - max(|grad A|, |grad B|) |`` with Sobel magnitudes."""
    (f, a, b), numpy_in = _tensors(fused, a, b)
    if f.shape[-1] < 3 or f.shape[-2] < 3:
        raise ValueError("gradient loss needs images of at least 3x3")
    target = torch.maximum(sobel_gradient(a), sobel_gradient(b))
    return _result((sobel_gradient(f) - target).abs().mean(), numpy_in)


def _ssim_flat(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """SSIM over the last dimension (one value per flattened patch)."""
    mx, my = x.mean(-1), y.mean(-1)
    dx, dy = x - mx[..., None], y - my[..., None]
    vx, vy = (dx * dx).mean(-1), (dy * dy).mean(-1)
    cov = (dx * dy).mean(-1)
    return ((2 * mx * my + C1) * (2 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))


def ssim_index(x_patch, y_patch) -> Number:
    """Single-window SSIM of two equally sized patches (dynamic range 1)."""
    (x, y), numpy_in = _tensors(x_patch, y_patch)
    return _result(_ssim_flat(x.reshape(-1), y.reshape(-1)), numpy_in)


def std_patch_select(a_patch, b_patch) -> str:
    """``"A"`` when A's patch has the larger (or equal) standard deviation, else ``"B"``."""
    a = np.asarray(a_patch.detach() if isinstance(a_patch, torch.Tensor) else a_patch, dtype=np.float64)
    b = np.asarray(b_patch.detach() if isinstance(b_patch, torch.Tensor) else b_patch, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("patch shapes differ")
    return "A" if a.std() >= b.std() else "B"


def _patches(x: torch.Tensor, patch_size: int, stride: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    flat = x.reshape(-1, 1, h, w)
    cols = F.unfold(flat, kernel_size=patch_size, stride=stride)  # (N, p*p, P)
    return cols.transpose(1, 2)  # (N, P, p*p)


def ssim_std_loss(fused, a, b, patch_size: int = 16, stride: int = 16) -> Number:
    """``1 - mean_P SSIM(F_P, S(A_P, B_P))`` where S picks the higher-std source patch."""
    (f, a, b), numpy_in = _tensors(fused, a, b)
    h, w = f.shape[-2:]
    if patch_size < 1 or stride < 1:
        raise ValueError("patch size and stride must be positive")
    if patch_size > min(h, w):
        raise ValueError(f"patch size {patch_size} exceeds image extent {h}x{w}")
    fp, ap, bp = (_patches(x, patch_size, stride) for x in (f, a, b))
    take_a = ap.std(-1, unbiased=False) >= bp.std(-1, unbiased=False)
    ref = torch.where(take_a[..., None], ap, bp)
    return _result(1.0 - _ssim_flat(fp, ref).mean(), numpy_in)


@dataclass(frozen=True)
class LossBreakdown:
    l_int: Number
    l_ssim: Number
    l_grad: Number
    total: Number
    alpha: float
    beta: float
    gamma: float = 1.0

    def as_floats(self) -> dict[str, float]:
        return {k: float(_detach(getattr(self, k))) for k in ("l_int", "l_ssim", "l_grad", "total")}


def total_loss(fused, a, b, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
               patch_size: int = 16, stride: int = 16, gamma: float = 1.0) -> LossBreakdown:
    """``alpha * l_int + beta * l_ssim + gamma * l_grad`` (``gamma`` is 1 outside ablations)."""
    l_int = intensity_loss(fused, a, b)
    l_ssim = ssim_std_loss(fused, a, b, patch_size, stride)
    l_grad = gradient_loss(fused, a, b)
    total = alpha * l_int + beta * l_ssim + (l_grad if gamma == 1.0 else gamma * l_grad)
    return LossBreakdown(l_int, l_ssim, l_grad, total, alpha, beta, gamma)
