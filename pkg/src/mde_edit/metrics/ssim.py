from __future__ import annotations

import numpy as np
from skimage.metrics import structural_similarity

from ..core import EmptyMask, ShapeMismatch

K1, K2 = 0.01, 0.03
SIGMA = 1.5


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM of two ``[C, H, W]`` images, averaged over channels.

    Gaussian window (sigma 1.5, 11x11), population statistics, C1 = (0.01 L)^2,
    C2 = (0.03 L)^2.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    _, full = structural_similarity(
        a,
        b,
        data_range=data_range,
        channel_axis=0,
        gaussian_weights=True,
        sigma=SIGMA,
        use_sample_covariance=False,
        K1=K1,
        K2=K2,
        full=True,
    )
    return full.mean(0)


def bg_ssim(original: np.ndarray, edited: np.ndarray, background_mask: np.ndarray, data_range: float = 1.0) -> float:
    """SSIM averaged over background pixels.

    Foreground pixels of both images are replaced by the same constant first, so the
    score does not depend on anything inside the edit regions.
    """
    bg = np.asarray(background_mask).astype(bool)
    if not bg.any():
        raise EmptyMask("background mask is empty")
    a = np.array(original, dtype=np.float64)
    b = np.array(edited, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    fill = 0.5 * data_range
    a[..., ~bg] = fill
    b[..., ~bg] = fill
    return float(ssim_map(a, b, data_range)[bg].mean())
