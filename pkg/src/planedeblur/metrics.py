"""Image quality metrics for the evaluation harness."""

from __future__ import annotations

import numpy as np
from skimage.metrics import structural_similarity

PSNR_CAP = 99.0


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luminance for color images; identity for grayscale."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ np.array([0.299, 0.587, 0.114])
    raise ValueError("expected a grayscale or 3-channel image")


def _crop(image: np.ndarray, border: int) -> np.ndarray:
    if border <= 0:
        return image
    if 2 * border >= min(image.shape[:2]):
        raise ValueError("border crop leaves no pixels")
    return image[border:-border, border:-border]


def psnr(result: np.ndarray, reference: np.ndarray, border: int = 0,
         peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """Luminance PSNR in dB with optional border crop; capped for identity."""
    a = _crop(luminance(result), border)
    b = _crop(luminance(reference), border)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * np.log10(peak ** 2 / mse))


def ssim(result: np.ndarray, reference: np.ndarray, border: int = 0,
         peak: float = 1.0) -> float:
    """Structural similarity on luminance over the valid region."""
    a = _crop(luminance(result), border)
    b = _crop(luminance(reference), border)
    return float(structural_similarity(a, b, data_range=peak))


def mask_accuracy(labels: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of pixels whose plane label matches the ground truth."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    if labels.shape != truth.shape:
        raise ValueError("label map shapes differ")
    return float(np.mean(labels == truth))
