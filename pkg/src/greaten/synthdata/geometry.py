"""Geometry derived from disparity maps: occlusion and surface normals."""

from __future__ import annotations

import numpy as np


def occlusion_from_disparity(
    disp_left: np.ndarray, disp_right: np.ndarray, threshold: float = 1.0
) -> np.ndarray:
    """Left-right consistency occlusion mask.

    A left pixel at column x with disparity d is occluded when the bilinear
    lookup of the right disparity map at x - d disagrees by more than
    ``threshold``, or when x - d falls outside the image.
    """
    if disp_left.shape != disp_right.shape:
        raise ValueError(f"shape mismatch {disp_left.shape} vs {disp_right.shape}")
    if disp_left.ndim != 2:
        raise ValueError("expected 2-d disparity maps")
    h, w = disp_left.shape
    disp_left = disp_left.astype(np.float64)
    xr = np.arange(w, dtype=np.float64)[None, :] - disp_left
    oob = (xr < 0.0) | (xr > w - 1.0)
    x0 = np.floor(xr)
    frac = xr - x0
    i0 = np.clip(x0.astype(np.int64), 0, w - 1)
    i1 = np.clip(i0 + 1, 0, w - 1)
    rows = np.arange(h, dtype=np.int64)[:, None]
    looked_up = (1.0 - frac) * disp_right[rows, i0] + frac * disp_right[rows, i1]
    mismatch = np.abs(disp_left - looked_up) > threshold
    return oob | (~oob & mismatch)


def normals_from_disparity(
    disp: np.ndarray, focal: float, baseline: float
) -> np.ndarray:
    """Unit surface normals from a disparity map via back-projection.

    Central differences of the back-projected point cloud give the tangent
    vectors; their cross product, oriented toward the camera, is returned in
    the (x right, y down, z toward camera) convention, so a fronto-parallel
    surface maps to (0, 0, 1). Border rows/columns copy the nearest interior
    value. Raises on non-positive disparity.
    """
    if disp.ndim != 2:
        raise ValueError("expected a 2-d disparity map")
    if np.any(disp <= 0):
        raise ValueError("disparity must be positive everywhere to recover depth")
    h, w = disp.shape
    z = focal * baseline / disp.astype(np.float64)
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    p = np.stack([xs * z / focal, ys * z / focal, z], axis=-1)

    dpdx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    dpdy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    c = np.cross(dpdx, dpdy)
    n = np.stack([-c[..., 0], -c[..., 1], c[..., 2]], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)

    out = np.empty((h, w, 3), dtype=np.float64)
    out[1:-1, 1:-1] = n
    out[0], out[-1] = out[1], out[-2]
    out[:, 0], out[:, -1] = out[:, 1], out[:, -2]
    return out.astype(np.float32)
