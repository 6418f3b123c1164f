"""Fidelity metrics on 8-bit RGB images.

PSNR is computed over all RGB samples of the full frame (no border crop) and
capped at 100 dB.  SSIM is the single-scale Gaussian-window form: an 11x11
window with sigma 1.5, evaluated only where the window fits inside the image,
per channel, then averaged over channels and positions.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatchError

PSNR_CAP = 100.0
DATA_RANGE = 255.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def to_uint8(a) -> np.ndarray:
    """Round half to even and saturate to [0, 255]."""
    return np.clip(np.rint(np.asarray(a, np.float64)), 0, 255).astype(np.uint8)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    err = mse(a, b)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(DATA_RANGE**2 / err))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim_map(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ShapeMismatchError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[:2]}")
    g = gaussian_window()
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        maps.append(num / den)
    return np.stack(maps, axis=-1)


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))
