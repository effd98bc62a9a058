"""False-color rendering of disparity and error maps.

Uses a fixed polynomial approximation of a turbo-style rainbow colormap so
the mapping never depends on per-image statistics: disparity is always
normalized by the configured maximum, making PNGs comparable across runs.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

__all__ = ["turbo_colormap", "disparity_to_color", "error_to_color", "save_png"]

_R = (0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943)
_G = (0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604)
_B = (0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973)


def _poly(x: np.ndarray, coeffs) -> np.ndarray:
    out = np.zeros_like(x)
    for c in reversed(coeffs):
        out = out * x + c
    return out


def turbo_colormap(values: np.ndarray) -> np.ndarray:
    """Maps values in [0, 1] (clamped) to float RGB in [0, 1], shape (..., 3)."""
    x = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([_poly(x, _R), _poly(x, _G), _poly(x, _B)], axis=-1)
    return np.clip(rgb, 0.0, 1.0)


def disparity_to_color(disparity: np.ndarray, max_disparity: float) -> np.ndarray:
    """uint8 H x W x 3 false-color image, normalized by max_disparity."""
    if max_disparity <= 0:
        raise ValueError(f"max_disparity must be positive, got {max_disparity}")
    rgb = turbo_colormap(np.asarray(disparity, dtype=np.float64) / max_disparity)
    return (rgb * 255.0 + 0.5).astype(np.uint8)


def error_to_color(error: np.ndarray, max_error: float = 5.0) -> np.ndarray:
    """uint8 false-color of absolute error, saturating at max_error pixels."""
    if max_error <= 0:
        raise ValueError(f"max_error must be positive, got {max_error}")
    rgb = turbo_colormap(np.abs(np.asarray(error, dtype=np.float64)) / max_error)
    return (rgb * 255.0 + 0.5).astype(np.uint8)


def save_png(path, array: np.ndarray) -> None:
    """Writes a uint8 grayscale (H, W) or color (H, W, 3) PNG."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 image data, got {arr.dtype}")
    Image.fromarray(arr).save(path)
