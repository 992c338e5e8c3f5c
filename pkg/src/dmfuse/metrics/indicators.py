"""Reference-free fusion quality indicators.

Every function takes images in [0, 1] (colour images are reduced to luma) and
works internally on the 0-255 scale used by the fusion literature, so values
are comparable with published tables.  Degenerate inputs (constant images,
no edges, zero variance) yield fixed sentinels instead of NaN.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage, signal

from ..imaging import SOBEL_X, SOBEL_Y, luma

SCALE = 255.0

# Q_W
QW_WINDOW = 8
# SSIM family
GAUSS_SIZE = 11
GAUSS_SIGMA = 1.5
K1, K2 = 0.01, 0.03
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
# VIFF
VIF_NOISE_VAR = 2.0
VIF_BANDS = 4
VIF_EPS = 1e-10
# Q_AB/F sigmoid constants (Xydeas & Petrovic)
QABF_TG, QABF_KG, QABF_DG = 0.9994, -15.0, 0.5
QABF_TA, QABF_KA, QABF_DA = 0.9879, -22.0, 0.8
# FMI
FMI_BINS = 256


def _prep(img) -> np.ndarray:
    return luma(np.asarray(img, dtype=np.float64)) * SCALE


def _prep_all(*imgs):
    arrs = [_prep(im) for im in imgs]
    for other in arrs[1:]:
        if other.shape != arrs[0].shape:
            raise ValueError(f"shape mismatch: {arrs[0].shape} vs {other.shape}")
    return arrs


# ----------------------------
# single-image statistics
# ----------------------------
def spatial_frequency(img) -> float:
    f = _prep(img)
    if min(f.shape) < 2:
        raise ValueError("spatial frequency needs at least 2x2 pixels")
    rf2 = np.mean(np.diff(f, axis=1) ** 2)
    cf2 = np.mean(np.diff(f, axis=0) ** 2)
    return float(np.sqrt(rf2 + cf2))


def standard_deviation(img) -> float:
    f = _prep(img)
    if f.size == 0:
        raise ValueError("empty image")
    return float(f.std())


def average_gradient(img) -> float:
    f = _prep(img)
    if min(f.shape) < 2:
        raise ValueError("average gradient needs at least 2x2 pixels")
    dx = f[:-1, 1:] - f[:-1, :-1]
    dy = f[1:, :-1] - f[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2.0)))


# ----------------------------
# Piella Q_W
# ----------------------------
def _window_stats(x, y, size):
    """Means, variances and covariance over every ``size x size`` window (valid)."""
    def box(z):
        return np.lib.stride_tricks.sliding_window_view(z, (size, size)).mean(axis=(-2, -1))
    mx, my = box(x), box(y)
    vx = np.maximum(box(x * x) - mx * mx, 0.0)
    vy = np.maximum(box(y * y) - my * my, 0.0)
    cxy = box(x * y) - mx * my
    return mx, my, vx, vy, cxy


def _ssim_map(mx, my, vx, vy, cxy, data_range=SCALE):
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def q_w(a, b, f, window: int = QW_WINDOW) -> float:
    """Piella's weighted fusion quality index.

    Per window: saliency = local variance, lambda = s_A / (s_A + s_B),
    similarity = SSIM of the source against the fused window, overall weight
    proportional to ``max(s_A, s_B)``.
    """
    a, b, f = _prep_all(a, b, f)
    if min(a.shape) < window:
        raise ValueError(f"Q_W needs images of at least {window}x{window}")
    _, _, va, vb, _ = _window_stats(a, b, window)
    q_af = _ssim_map(*_window_stats(a, f, window))
    q_bf = _ssim_map(*_window_stats(b, f, window))
    total = va + vb
    lam = np.divide(va, total, out=np.full_like(va, 0.5), where=total > 0)
    sal = np.maximum(va, vb)
    if sal.sum() > 0:
        weights = sal / sal.sum()
    else:
        weights = np.full_like(sal, 1.0 / sal.size)
    return float(np.sum(weights * (lam * q_af + (1 - lam) * q_bf)))


# ----------------------------
# SCD
# ----------------------------
def _pearson(x, y) -> float:
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy)))
    if den == 0.0:
        return 0.0
    return float(np.sum(dx * dy) / den)


def scd(a, b, f) -> float:
    """Sum of correlations of differences: ``corr(F - B, A) + corr(F - A, B)``."""
    a, b, f = _prep_all(a, b, f)
    return _pearson(f - b, a) + _pearson(f - a, b)


# ----------------------------
# VIFF
# ----------------------------
def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return h / h.sum()


def vif_band_window(band: int) -> np.ndarray:
    n = 2 ** (VIF_BANDS - band + 1) + 1
    return gaussian_window(n, n / 5.0)


def _vif_terms(ref, dist, win):
    """Per-location information terms (VID, VIND) of ``dist`` relative to ``ref``."""
    def filt(z):
        return ndimage.correlate(z, win, mode="reflect")
    mu1, mu2 = filt(ref), filt(dist)
    s1 = np.maximum(filt(ref * ref) - mu1 * mu1, 0.0)
    s2 = np.maximum(filt(dist * dist) - mu2 * mu2, 0.0)
    s12 = filt(ref * dist) - mu1 * mu2

    g = s12 / (s1 + VIF_EPS)
    sv = s2 - g * s12
    low1 = s1 < VIF_EPS
    g[low1] = 0.0
    sv[low1] = s2[low1]
    s1 = np.where(low1, 0.0, s1)
    low2 = s2 < VIF_EPS
    g[low2] = 0.0
    sv[low2] = 0.0
    neg = g < 0
    sv[neg] = s2[neg]
    g[neg] = 0.0
    sv = np.maximum(sv, VIF_EPS)

    vid = np.log1p(g * g * s1 / (sv + VIF_NOISE_VAR))
    vind = np.log1p(s1 / VIF_NOISE_VAR)
    return vid, vind


def viff_bands(a, b, f) -> list[float]:
    """Band-wise fused VIF; each band keeps, per location, the more informative source."""
    a, b, f = _prep_all(a, b, f)
    if min(a.shape) < 32:
        raise ValueError("VIFF needs images of at least 32x32")
    scores = []
    for band in range(1, VIF_BANDS + 1):
        win = vif_band_window(band)
        if band > 1:
            a, b, f = (ndimage.correlate(z, win, mode="reflect")[::2, ::2] for z in (a, b, f))
        vid_a, vind_a = _vif_terms(a, f, win)
        vid_b, vind_b = _vif_terms(b, f, win)
        take_a = (vind_a > vind_b) | ((vind_a == vind_b) & (vid_a >= vid_b))
        num = np.where(take_a, vid_a, vid_b).sum()
        den = np.where(take_a, vind_a, vind_b).sum()
        scores.append(float(num / den) if den > 0 else 1.0)
    return scores


def viff(a, b, f) -> float:
    return float(np.mean(viff_bands(a, b, f)))


# ----------------------------
# Q_AB/F
# ----------------------------
def _edge_maps(img):
    # replicated borders: a constant image has no edges anywhere, including the frame
    sx = ndimage.correlate(img, SOBEL_X, mode="nearest")
    sy = ndimage.correlate(img, SOBEL_Y, mode="nearest")
    strength = np.hypot(sx, sy)
    angle = np.full_like(img, math.pi / 2)
    nz = sx != 0
    with np.errstate(over="ignore"):  # tiny sx overflows to inf, whose arctan is the right limit
        angle[nz] = np.arctan(sy[nz] / sx[nz])
    return strength, angle


def _preservation(g_src, a_src, g_f, a_f):
    ratio = np.ones_like(g_src)
    gt = g_src > g_f
    lt = g_src < g_f
    ratio[gt] = g_f[gt] / g_src[gt]
    ratio[lt] = g_src[lt] / g_f[lt]
    orient = 1.0 - np.abs(a_src - a_f) / (math.pi / 2)
    qg = QABF_TG / (1.0 + np.exp(QABF_KG * (ratio - QABF_DG)))
    qa = QABF_TA / (1.0 + np.exp(QABF_KA * (orient - QABF_DA)))
    return qg * qa


def q_abf(a, b, f) -> float:
    """Xydeas-Petrovic edge preservation, weighted by source edge strength."""
    a, b, f = _prep_all(a, b, f)
    if min(a.shape) < 3:
        raise ValueError("Q_AB/F needs images of at least 3x3")
    ga, aa = _edge_maps(a)
    gb, ab = _edge_maps(b)
    gf, af = _edge_maps(f)
    den = float(np.sum(ga + gb))
    if den == 0.0:
        return 0.0
    num = np.sum(_preservation(ga, aa, gf, af) * ga + _preservation(gb, ab, gf, af) * gb)
    return float(num / den)


# ----------------------------
# MS-SSIM
# ----------------------------
def msssim_levels(height: int, width: int) -> int:
    """Number of scales that keep the coarsest image at least one Gaussian window wide."""
    m = min(height, width)
    if m < GAUSS_SIZE:
        raise ValueError(f"MS-SSIM needs images of at least {GAUSS_SIZE}x{GAUSS_SIZE}")
    levels = 1
    while levels < len(MSSSIM_WEIGHTS) and m // 2 ** levels >= GAUSS_SIZE:
        levels += 1
    return levels


def _ssim_cs(x, y, win):
    c1, c2 = (K1 * SCALE) ** 2, (K2 * SCALE) ** 2

    def filt(z):
        return signal.correlate2d(z, win, mode="valid")
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    cs = (2 * cxy + c2) / (vx + vy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _halve(z):
    h, w = (z.shape[0] // 2) * 2, (z.shape[1] // 2) * 2
    z = z[:h, :w]
    return 0.25 * (z[0::2, 0::2] + z[1::2, 0::2] + z[0::2, 1::2] + z[1::2, 1::2])


def msssim_components(x, f):
    """Per-scale (ssim, cs) values, finest first."""
    x, f = _prep_all(x, f)
    levels = msssim_levels(*x.shape)
    win = gaussian_window(GAUSS_SIZE, GAUSS_SIGMA)
    out = []
    for level in range(levels):
        out.append(_ssim_cs(x, f, win))
        if level < levels - 1:
            x, f = _halve(x), _halve(f)
    return out


def msssim(x, f) -> float:
    """Multi-scale SSIM; scales and weights shrink for images under 176 pixels."""
    comps = msssim_components(x, f)
    w = np.asarray(MSSSIM_WEIGHTS[:len(comps)])
    if len(comps) < len(MSSSIM_WEIGHTS):
        # truncated pyramids rescale the surviving exponents to sum to one
        w = w / w.sum()
    value = 1.0
    for level, ((s, cs), wl) in enumerate(zip(comps, w)):
        term = s if level == len(comps) - 1 else cs
        value *= max(term, 0.0) ** wl
    return float(value)


# ----------------------------
# FMI (wavelet features)
# ----------------------------
def haar_details(img) -> np.ndarray:
    """One-level orthonormal Haar LH, HL and HH coefficients, flattened together."""
    z = np.asarray(img, dtype=np.float64)
    if z.shape[0] % 2 or z.shape[1] % 2:
        z = np.pad(z, ((0, z.shape[0] % 2), (0, z.shape[1] % 2)), mode="edge")
    p, q = z[0::2, 0::2], z[0::2, 1::2]
    r, s = z[1::2, 0::2], z[1::2, 1::2]
    lh = (p - q + r - s) / 2.0
    hl = (p + q - r - s) / 2.0
    hh = (p - q - r + s) / 2.0
    return np.concatenate([lh.ravel(), hl.ravel(), hh.ravel()])


def _bin(values: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def normalized_mi(x: np.ndarray, y: np.ndarray, bins: int = FMI_BINS) -> float:
    """``I(X;Y) / (H(X) + H(Y))`` from a ``bins x bins`` joint histogram."""
    ix, iy = _bin(x, bins), _bin(y, bins)
    joint = np.bincount(ix * bins + iy, minlength=bins * bins).reshape(bins, bins)
    hx, hy = _entropy(joint.sum(1)), _entropy(joint.sum(0))
    if hx + hy == 0.0:
        return 0.0
    mi = hx + hy - _entropy(joint.ravel())
    return float(mi / (hx + hy))


def fmi_wt(a, b, f) -> float:
    a, b, f = _prep_all(a, b, f)
    fa, fb, ff = haar_details(a), haar_details(b), haar_details(f)
    return normalized_mi(ff, fa) + normalized_mi(ff, fb)
