"""PSNR / SSIM / MAE computed in the integer domain of a given bit depth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    mae: float

    @property
    def identical(self) -> bool:
        return math.isinf(self.psnr)

    def format(self) -> str:
        p = "inf" if self.identical else f"{self.psnr:.4f}"
        return f"psnr={p} dB  ssim={self.ssim:.6f}  mae={self.mae:.6f}"


def _check(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {test.shape}")
    return ref, test


def max_value(bit_depth: int) -> float:
    if bit_depth not in (8, 16):
        raise ValueError(f"bit depth must be 8 or 16, got {bit_depth}")
    return float(2**bit_depth - 1)


def psnr(ref, test, bit_depth: int = 8) -> float:
    """``10 log10(MAX^2 / MSE)``; ``inf`` for identical inputs."""
    ref, test = _check(ref, test)
    mse = np.mean((ref - test) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_value(bit_depth) ** 2 / mse)


def mae(ref, test, bit_depth: int = 8) -> float:
    """Mean absolute error normalized to [0, 1] by ``MAX``."""
    ref, test = _check(ref, test)
    return float(np.mean(np.abs(ref - test)) / max_value(bit_depth))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' filtering over the first two axes
    k = g.size
    out = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(out, k, axis=1) @ g


def ssim(ref, test, bit_depth: int = 8, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Images smaller than the window use the largest odd window that fits.
    """
    ref, test = _check(ref, test)
    if ref.ndim == 2:
        ref, test = ref[..., None], test[..., None]
    size = min(window, ref.shape[0], ref.shape[1])
    if size % 2 == 0:
        size -= 1
    g = gaussian_window(size, sigma)
    L = max_value(bit_depth)
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    mu_x, mu_y = _filter(ref, g), _filter(test, g)
    sxx = _filter(ref * ref, g) - mu_x**2
    syy = _filter(test * test, g) - mu_y**2
    sxy = _filter(ref * test, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def evaluate(ref, test, bit_depth: int = 8) -> MetricReport:
    return MetricReport(psnr(ref, test, bit_depth), ssim(ref, test, bit_depth), mae(ref, test, bit_depth))
