"""Image carriers, colour conversion, Sobel gradients and patch statistics.

Images travel through the package as float64 numpy arrays in [0, 1]
(``H x W`` for grayscale, ``H x W x 3`` for RGB).  Noised images and network
activations are plain float arrays or tensors without the range constraint.
8-bit quantisation only happens in :func:`read_png` / :func:`write_png`.
"""
from __future__ import annotations

from pathlib import Path
from typing import NamedTuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

ArrayOrTensor = Union[np.ndarray, torch.Tensor]

MIN_SIZE = 8

# BT.601 full range
KR, KG, KB = 0.299, 0.587, 0.114
CB_SCALE = 2.0 * (1.0 - KB)  # 1.772
CR_SCALE = 2.0 * (1.0 - KR)  # 1.402

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


class YCbCrImage(NamedTuple):
    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray


def _check_range(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{what} values must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]")


def as_gray(img, *, min_size: int = MIN_SIZE) -> np.ndarray:
    """Validate and return a float64 ``H x W`` grayscale image in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"grayscale image must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise ValueError(f"image must be at least {min_size}x{min_size}, got {arr.shape}")
    _check_range(arr, "grayscale image")
    return arr


def as_color(img, *, min_size: int = MIN_SIZE) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"colour image must be H x W x 3, got shape {arr.shape}")
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise ValueError(f"image must be at least {min_size}x{min_size}, got {arr.shape[:2]}")
    _check_range(arr, "colour image")
    return arr


def as_raw(field) -> np.ndarray:
    arr = np.asarray(field, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("field contains non-finite values")
    return arr


def is_color(img) -> bool:
    return np.ndim(img) == 3 and np.shape(img)[-1] == 3


# ----------------------------
# Colour space
# ----------------------------
def rgb_to_ycbcr(img) -> YCbCrImage:
    rgb = as_color(img, min_size=1)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = KR * r + KG * g + KB * b
    cb = 0.5 + (b - y) / CB_SCALE
    cr = 0.5 + (r - y) / CR_SCALE
    return YCbCrImage(y, cb, cr)


def ycbcr_to_rgb(img: YCbCrImage) -> np.ndarray:
    y, cb, cr = (np.asarray(p, dtype=np.float64) for p in img)
    if not (y.shape == cb.shape == cr.shape):
        raise ValueError("Y, Cb and Cr planes must share a shape")
    dr = CR_SCALE * (cr - 0.5)
    db = CB_SCALE * (cb - 0.5)
    d = np.stack([dr, -(KR * dr + KB * db) / KG, db], axis=-1)
    # out-of-gamut pixels lose saturation rather than luma: offsets d carry zero luma,
    # so shrinking them toward neutral keeps Y exact where plain clipping would not
    yc = np.clip(y, 0.0, 1.0)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        room = np.where(d > 0, (1.0 - yc) / d, np.where(d < 0, -yc / d, np.inf))
    s = np.minimum(1.0, room.min(axis=-1, initial=np.inf))[..., None]
    return np.clip(yc + s * d, 0.0, 1.0)


def luma(img) -> np.ndarray:
    """Y plane of a colour image; grayscale images pass through unchanged."""
    if is_color(img):
        return rgb_to_ycbcr(img).y
    return np.asarray(img, dtype=np.float64)


# ----------------------------
# Gradients
# ----------------------------
def _sobel_components_torch(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    shape = x.shape
    flat = x.reshape(-1, 1, shape[-2], shape[-1])
    padded = F.pad(flat, (1, 1, 1, 1), mode="replicate")
    kx = torch.as_tensor(SOBEL_X, dtype=x.dtype, device=x.device).view(1, 1, 3, 3)
    ky = torch.as_tensor(SOBEL_Y, dtype=x.dtype, device=x.device).view(1, 1, 3, 3)
    gx = F.conv2d(padded, kx).reshape(shape)
    gy = F.conv2d(padded, ky).reshape(shape)
    return gx, gy


def safe_magnitude(gx: torch.Tensor, gy: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite derivative at 0; route those entries through a constant
    sq = gx * gx + gy * gy
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def sobel_components(img: ArrayOrTensor):
    """Horizontal and vertical 3x3 Sobel responses with replicate borders."""
    if isinstance(img, torch.Tensor):
        return _sobel_components_torch(img)
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape[-1] < 3 or arr.shape[-2] < 3:
        raise ValueError("Sobel gradient needs at least 3x3 pixels")
    gx, gy = _sobel_components_torch(torch.from_numpy(arr))
    return gx.numpy(), gy.numpy()


def sobel_gradient(img: ArrayOrTensor):
    """Per-pixel gradient magnitude ``sqrt(Gx**2 + Gy**2)``.

    Accepts numpy arrays or torch tensors with trailing ``H x W`` dimensions and
    returns the same kind.  Tensor inputs stay differentiable (the gradient is
    taken as zero where the magnitude vanishes).
    """
    if isinstance(img, torch.Tensor):
        if img.shape[-1] < 3 or img.shape[-2] < 3:
            raise ValueError("Sobel gradient needs at least 3x3 pixels")
        return safe_magnitude(*_sobel_components_torch(img))
    gx, gy = sobel_components(img)
    return np.hypot(gx, gy)


# ----------------------------
# Patches
# ----------------------------
def patch_grid(height: int, width: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    """Top-left corners of the patch tiling, row-major."""
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be positive")
    if patch_size > min(height, width):
        raise ValueError(f"patch_size {patch_size} exceeds image extent {height}x{width}")
    rows = range(0, height - patch_size + 1, stride)
    cols = range(0, width - patch_size + 1, stride)
    return [(r, c) for r in rows for c in cols]


def local_std(img, patch_size: int, stride: int) -> np.ndarray:
    """Population standard deviation of every ``patch_size`` square on a strided grid."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("local_std expects a 2-D image")
    if patch_size > min(arr.shape):
        raise ValueError(f"patch_size {patch_size} exceeds image extent {arr.shape}")
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be positive")
    windows = np.lib.stride_tricks.sliding_window_view(arr, (patch_size, patch_size))
    windows = windows[::stride, ::stride]
    return windows.std(axis=(-2, -1))


# ----------------------------
# PNG I/O
# ----------------------------
def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: Union[str, Path], img) -> None:
    arr = to_uint8(img)
    mode = "RGB" if arr.ndim == 3 else "L"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False)


def read_png(path: Union[str, Path]) -> np.ndarray:
    """Decode an 8-bit PNG to float64 in [0, 1]; RGB stays RGB, everything else becomes gray."""
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P"):
            arr = np.asarray(im.convert("RGB"))
            if im.mode == "P" and np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 1], arr[..., 2]):
                arr = arr[..., 0]
        else:
            arr = np.asarray(im.convert("L"))
    return arr.astype(np.float64) / 255.0
