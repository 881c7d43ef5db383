"""Image quality metrics: PSNR on 8-bit-quantized images, SSIM on floats."""

from __future__ import annotations

import numpy as np

from .loss import ssim

PSNR_CAP = 99.0


def quantize_8bit(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def psnr_8bit(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR between two [0,1] float images after 8-bit quantization (max 255).

    Identical images report the capped sentinel 99.0 dB (the MSE = 0
    convention).
    """
    qa = quantize_8bit(a).astype(np.float64)
    qb = quantize_8bit(b).astype(np.float64)
    mse = np.mean((qa - qb) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(255.0 ** 2 / mse)), PSNR_CAP)


def ssim_metric(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two (H, W, 3) float images in [0, 1]."""
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    return ssim(a64, b64)
