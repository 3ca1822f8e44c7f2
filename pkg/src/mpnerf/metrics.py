"""Image-quality metrics on float images in [0, 1]."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError

SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit peak; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def ssim(a, b) -> float:
    """Mean SSIM with a 7x7 uniform window over valid positions, averaged over channels.

    Local statistics are population (1/N) moments of each window.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValidationError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    per_channel = []
    for c in range(a.shape[2]):
        wa = sliding_window_view(a[..., c], (SSIM_WINDOW, SSIM_WINDOW))
        wb = sliding_window_view(b[..., c], (SSIM_WINDOW, SSIM_WINDOW))
        mu_a = wa.mean(axis=(-2, -1))
        mu_b = wb.mean(axis=(-2, -1))
        # same expression for variance and covariance keeps ssim(a, a) == 1 exactly
        var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
        var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
        cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        per_channel.append(np.mean(num / den))
    return float(np.mean(per_channel))
