"""Image quality metrics on float images in [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError

_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 window
_K1 = 0.01
_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("psnr inputs must share a shape")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _filt(x: np.ndarray) -> np.ndarray:
    # truncate chosen so the kernel radius is exactly _SSIM_RADIUS pixels
    return gaussian_filter(
        x, sigma=_SSIM_SIGMA, mode="constant", truncate=_SSIM_RADIUS / _SSIM_SIGMA
    )


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5).

    Inputs are (H, W) or (H, W, C); channels are scored independently and
    averaged. The border where the window hangs off the image is cropped
    from the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("ssim inputs must share a shape")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ContractError("ssim expects (H, W) or (H, W, C)")
    H, W = a.shape[:2]
    r = _SSIM_RADIUS
    if H <= 2 * r or W <= 2 * r:
        raise ContractError("image too small for the SSIM window")

    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[..., ch]
        y = b[..., ch]
        mu_x = _filt(x)
        mu_y = _filt(y)
        xx = _filt(x * x) - mu_x * mu_x
        yy = _filt(y * y) - mu_y * mu_y
        xy = _filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        smap = num / den
        vals.append(np.mean(smap[r:-r, r:-r]))
    return float(np.mean(vals))
