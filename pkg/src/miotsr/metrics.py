"""Full-reference quality metrics: MSE, PSNR (all channels), SSIM (luma)."""

from __future__ import annotations

import math

import numpy as np

from .imageio import Image, luma

PEAK = 255.0
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
C1 = (K1 * PEAK) ** 2
C2 = (K2 * PEAK) ** 2

CONVENTIONS = {
    "ssim": f"luma (BT.601 Y), {WINDOW}x{WINDOW} gaussian sigma={SIGMA}, valid windows, "
    f"C1=({K1}*255)^2, C2=({K2}*255)^2",
    "psnr": "10*log10(255^2/MSE) over all RGB samples jointly; identical inputs -> inf",
}


def _samples(img) -> np.ndarray:
    if isinstance(img, Image):
        return img.to_u8().planes.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    x, y = _samples(a), _samples(b)
    _same_shape(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB; ``math.inf`` when the inputs are identical."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK**2 / m)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    h, w = p.shape
    rows = sum(g[i] * p[i : h - n + 1 + i] for i in range(n))
    return sum(g[i] * rows[:, i : w - n + 1 + i] for i in range(n))


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM of two float planes at every valid window position."""
    _same_shape(x, y)
    if min(x.shape) < WINDOW:
        raise ValueError(f"plane {x.shape} smaller than the {WINDOW}x{WINDOW} window")
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM on the luma plane (RGB inputs are converted first)."""
    x = luma(a) if isinstance(a, Image) else np.asarray(a, dtype=np.float64)
    y = luma(b) if isinstance(b, Image) else np.asarray(b, dtype=np.float64)
    if np.array_equal(x, y):
        return 1.0
    return float(np.clip(np.mean(ssim_map(x, y)), -1.0, 1.0))
