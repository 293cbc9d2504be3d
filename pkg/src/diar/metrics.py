"""Image quality metrics: RMSE, PSNR and single-scale SSIM.

When validity masks are supplied, RMSE/PSNR are computed over jointly valid
pixels only, and the SSIM map is averaged over pixels whose full window lies
inside the joint mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import minimum_filter

from .imaging import Image

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

# BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class MetricReport:
    rmse: float
    psnr: float
    ssim: float

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr)


def _check_shapes(a: Image, b: Image):
    if a.data.shape != b.data.shape:
        raise ValueError(f"metric shape mismatch: {a.data.shape} vs {b.data.shape}")


def _joint_mask(a: Image, mask_a, mask_b):
    if mask_a is None and mask_b is None:
        return None
    m = np.ones((a.height, a.width), dtype=bool)
    if mask_a is not None:
        m &= np.asarray(mask_a, dtype=bool)
    if mask_b is not None:
        m &= np.asarray(mask_b, dtype=bool)
    return m


def rmse(a: Image, b: Image, mask_a=None, mask_b=None) -> float:
    _check_shapes(a, b)
    d2 = (a.data - b.data) ** 2
    m = _joint_mask(a, mask_a, mask_b)
    if m is None:
        return float(np.sqrt(d2.mean()))
    if not m.any():
        raise ValueError("rmse: joint validity mask is empty")
    return float(np.sqrt(d2[m].mean()))


def psnr(a: Image, b: Image, peak: float = 1.0, mask_a=None, mask_b=None) -> float:
    """10 * log10(peak^2 / MSE); returns math.inf for identical inputs."""
    r = rmse(a, b, mask_a=mask_a, mask_b=mask_b)
    if r == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / (r * r)))


def _luma(img: Image) -> np.ndarray:
    if img.channels == 1:
        return img.data[:, :, 0]
    return img.data @ _LUMA


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter2_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid'-mode correlation with a 1-D kernel in both axes."""
    from numpy.lib.stride_tricks import sliding_window_view

    n = len(k)
    rows = sliding_window_view(x, n, axis=0) @ k
    return sliding_window_view(rows, n, axis=1) @ k


def ssim(a: Image, b: Image, mask_a=None, mask_b=None) -> float:
    """Mean single-scale SSIM on luma (11x11 Gaussian window, sigma 1.5,
    K1=0.01, K2=0.03, dynamic range 1)."""
    _check_shapes(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ValueError(f"ssim requires extents >= {SSIM_WINDOW}")
    x = _luma(a)
    y = _luma(b)
    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = _filter2_valid(x, k)
    mu_y = _filter2_valid(y, k)
    sxx = _filter2_valid(x * x, k) - mu_x * mu_x
    syy = _filter2_valid(y * y, k) - mu_y * mu_y
    sxy = _filter2_valid(x * y, k) - mu_x * mu_y
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    smap = num / den
    m = _joint_mask(a, mask_a, mask_b)
    if m is None:
        return float(smap.mean())
    # keep only window centers whose full 11x11 support is valid
    full = minimum_filter(m.astype(np.uint8), size=SSIM_WINDOW, mode="constant", cval=0)
    half = SSIM_WINDOW // 2
    valid_centers = full[half:-half, half:-half].astype(bool)
    if not valid_centers.any():
        raise ValueError("ssim: no fully valid windows under the joint mask")
    return float(smap[valid_centers].mean())


def report(a: Image, b: Image, mask_a=None, mask_b=None) -> MetricReport:
    return MetricReport(
        rmse=rmse(a, b, mask_a=mask_a, mask_b=mask_b),
        psnr=psnr(a, b, mask_a=mask_a, mask_b=mask_b),
        ssim=ssim(a, b, mask_a=mask_a, mask_b=mask_b),
    )
