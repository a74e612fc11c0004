"""Image quality metrics over float arrays in [0, 1], shaped (c, h, w)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name} shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ValueError(f"{name} expects (c, h, w) images, got {a.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit dynamic range, capped at
    100.0 (the value returned for identical images)."""
    a, b = _check_pair(a, b, "psnr")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


def mae(a, b):
    a, b = _check_pair(a, b, "mae")
    return float(np.mean(np.abs(a - b)))


def _gaussian_window(size, sigma):
    half = (size - 1) / 2
    g = np.exp(-((np.arange(size) - half) ** 2) / (2 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b):
    """Mean structural similarity over all valid 11x11 windows and channels
    (Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1)."""
    a, b = _check_pair(a, b, "ssim")
    c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim needs images at least {SSIM_WINDOW}px, got {h}x{w}")
    kern = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    def filt(img):
        win = sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW), axis=(1, 2))
        return np.tensordot(win, kern, axes=([3, 4], [0, 1]))

    mu_a = filt(a)
    mu_b = filt(b)
    ea2 = filt(a * a)
    eb2 = filt(b * b)
    eab = filt(a * b)
    va = ea2 - mu_a * mu_a
    vb = eb2 - mu_b * mu_b
    cov = eab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2)
    return float(np.mean(num / den))
