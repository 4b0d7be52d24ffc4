"""Image quality metrics over [0, 1] images (H, W) or (H, W, C)."""

from __future__ import annotations

import numpy as np

__all__ = ["psnr", "ssim"]

_PSNR_CAP = 100.0
_MSE_FLOOR = 1e-10


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """10*log10(1/MSE) for unit-range images, capped at 100 dB."""
    img, ref = _check_pair(img, ref)
    mse = float(np.mean((img - ref) ** 2))
    if mse < _MSE_FLOOR:
        return _PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian filtering, valid region only."""
    k = len(g)
    win = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("i,j,hwij->hw", g, g, win)


def ssim(img: np.ndarray, ref: np.ndarray, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean local structural similarity, 11x11 Gaussian window (sigma 1.5).

    Channels are scored independently and averaged.
    """
    img, ref = _check_pair(img, ref)
    if img.ndim == 2:
        img = img[:, :, None]
        ref = ref[:, :, None]
    if img.shape[0] < 11 or img.shape[1] < 11:
        raise ValueError(f"images must be at least 11x11, got {img.shape[:2]}")
    g = _gaussian_kernel()
    scores = []
    for ch in range(img.shape[2]):
        x = img[:, :, ch]
        y = ref[:, :, ch]
        mu_x = _filter_valid(x, g)
        mu_y = _filter_valid(y, g)
        xx = _filter_valid(x * x, g) - mu_x * mu_x
        yy = _filter_valid(y * y, g) - mu_y * mu_y
        xy = _filter_valid(x * y, g) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
