"""Deterministic piecewise-constant test images with intensities in [0, 1]."""

from __future__ import annotations

import numpy as np

__all__ = ["phantom", "crop_center"]


def phantom(n: int = 192) -> np.ndarray:
    """Disks, rectangles and a ramp on a dark background, drawn on the unit square.

    The geometry scales with ``n``, so every size shows the same scene.
    """
    if n < 8:
        raise ValueError(f"phantom needs n >= 8, got {n}")
    u = (np.arange(n) + 0.5) / n
    row, col = np.meshgrid(u, u, indexing="ij")
    img = np.full((n, n), 0.1)
    img[(row - 0.5) ** 2 + (col - 0.5) ** 2 < 0.38**2] = 0.35
    img[(row - 0.3) ** 2 + (col - 0.35) ** 2 < 0.12**2] = 0.9
    img[(row - 0.65) ** 2 + (col - 0.62) ** 2 < 0.09**2] = 0.6
    img[(np.abs(row - 0.72) < 0.06) & (np.abs(col - 0.3) < 0.12)] = 0.75
    img[(np.abs(row - 0.25) < 0.1) & (np.abs(col - 0.72) < 0.04)] = 0.05
    ramp = (np.abs(row - 0.9) < 0.05) & (np.abs(col - 0.5) < 0.3)
    img[ramp] = 0.2 + 0.6 * (col[ramp] - 0.2) / 0.6
    return img


def crop_center(image: np.ndarray, size: int) -> np.ndarray:
    """Central ``size x size`` section."""
    n = image.shape[0]
    if size > n:
        raise ValueError(f"cannot crop {size} from {n}")
    lo = (n - size) // 2
    return image[lo:lo + size, lo:lo + size].copy()
