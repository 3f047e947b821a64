"""Small separable filters shared by feature extraction and edge refinement."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import InvalidSigma


def gaussian_blur(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, kernel truncated at radius ceil(3*sigma),
    renormalized to unit sum, borders replicated."""
    if sigma <= 0:
        raise InvalidSigma(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = ndimage.correlate1d(values.astype(np.float64), kernel, axis=0, mode="nearest")
    return ndimage.correlate1d(out, kernel, axis=1, mode="nearest")


def sobel_magnitude(values: np.ndarray) -> np.ndarray:
    """3x3 Sobel gradient magnitude with replicated borders.

    Expects a float array and computes in its dtype (float32 stays float32).
    """
    two = values.dtype.type(2.0)
    v = np.pad(values, 1, mode="edge")
    # horizontal derivative: [1,2,1]^T smoothing x [-1,0,1] difference
    sm_y = v[:-2, :] + two * v[1:-1, :] + v[2:, :]
    gx = sm_y[:, 2:] - sm_y[:, :-2]
    sm_x = v[:, :-2] + two * v[:, 1:-1] + v[:, 2:]
    gy = sm_x[2:, :] - sm_x[:-2, :]
    return np.sqrt(gx * gx + gy * gy)
