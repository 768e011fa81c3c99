"""Image fidelity metrics for unit-range images: PSNR and windowed SSIM."""

from __future__ import annotations

import numpy as np

from .autodiff import ContractViolation

PSNR_CAP_DB = 99.0
PSNR_MSE_FLOOR = 1e-10

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    10 * log10(1 / MSE), capped at 99 dB once MSE drops below 1e-10 so
    identical images do not produce infinities.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"psnr: shapes {a.shape} and {b.shape} differ")
    err = float(((a - b) ** 2).mean())
    if err < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / err))


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean structural similarity over sliding windows, per channel.

    Uses sample statistics (N-1 normalization) inside each window and
    dynamic range L = 1.  Accepts (H, W) or (H, W, C) arrays.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ContractViolation(f"ssim: expected (H, W) or (H, W, C), got {a.shape}")
    h, w, _ = a.shape
    if h < window or w < window:
        raise ContractViolation(f"ssim: image {a.shape} smaller than {window}x{window} window")
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    n = window * window
    norm = n / (n - 1)  # sample covariance
    vals = []
    for ch in range(a.shape[2]):
        wa = np.lib.stride_tricks.sliding_window_view(a[..., ch], (window, window))
        wb = np.lib.stride_tricks.sliding_window_view(b[..., ch], (window, window))
        mu_a = wa.mean(axis=(-1, -2))
        mu_b = wb.mean(axis=(-1, -2))
        var_a = wa.var(axis=(-1, -2)) * norm
        var_b = wb.var(axis=(-1, -2)) * norm
        cov = ((wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b) * norm
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append(num / den)
    return float(np.mean(vals))
