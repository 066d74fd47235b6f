"""PSNR and SSIM on the luma channel."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionError, ParameterError

BT601 = np.array([0.299, 0.587, 0.114])
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 255.0


@dataclass
class EvalResult:
    psnr_db: float
    ssim: float
    per_image: list[dict] = field(default_factory=list)


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """[3, H, W] on [0, 255] -> [H, W] luma, full-range BT.601 weights."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected [3, H, W], got {img.shape}")
    return np.tensordot(BT601, np.asarray(img, dtype=np.float64), axes=1)


def psnr_y(sr: np.ndarray, hr: np.ndarray, shave: int = 0) -> float:
    if sr.shape != hr.shape:
        raise DimensionError(f"psnr_y: {sr.shape} vs {hr.shape}")
    if shave < 0:
        raise ParameterError("shave must be >= 0")
    d = rgb_to_y(sr) - rgb_to_y(hr)
    if shave:
        d = d[shave:-shave, shave:-shave]
    mse = float(np.mean(d * d))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(DATA_RANGE ** 2 / mse)


def _gaussian_window() -> np.ndarray:
    x = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = correlate1d(correlate1d(img, g, axis=0), g, axis=1)
    r = SSIM_WIN // 2
    return out[r:-r, r:-r]


def ssim_y(sr: np.ndarray, hr: np.ndarray, shave: int = 0) -> float:
    """Single-scale SSIM on Y with an 11x11 Gaussian window (sigma 1.5), mean over valid windows."""
    if sr.shape != hr.shape:
        raise DimensionError(f"ssim_y: {sr.shape} vs {hr.shape}")
    x, y = rgb_to_y(sr), rgb_to_y(hr)
    if shave:
        x, y = x[shave:-shave, shave:-shave], y[shave:-shave, shave:-shave]
    if min(x.shape) < SSIM_WIN:
        raise ParameterError(f"image {x.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    g = _gaussian_window()
    c1, c2 = (SSIM_K1 * DATA_RANGE) ** 2, (SSIM_K2 * DATA_RANGE) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
