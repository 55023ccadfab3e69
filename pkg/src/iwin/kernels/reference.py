"""Pure-numpy fallback for the window sampling kernels.

Semantics are identical to the compiled backend: fractional-coordinate
bilinear gathers with zero-extension outside the map, and the matching
gradients w.r.t. both the feature map and the sample coordinates.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def _corners(px, py, H, W):
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    wx1 = px - x0
    wy1 = py - y0
    corners = []
    for yc, wy in ((y0, 1.0 - wy1), (y0 + 1, wy1)):
        for xc, wx in ((x0, 1.0 - wx1), (x0 + 1, wx1)):
            valid = (yc >= 0) & (yc < H) & (xc >= 0) & (xc < W)
            corners.append((np.clip(yc, 0, H - 1), np.clip(xc, 0, W - 1),
                            wy * wx, valid))
    return corners


def bilinear_gather(z: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample z (B, C, H, W) at fractional points px/py (B, P) -> (B, P, C)."""
    B, C, H, W = z.shape
    P = px.shape[1]
    z2 = z.reshape(B, C, H * W)
    bidx = np.arange(B)[:, None]
    out = np.zeros((B, P, C), dtype=z.dtype)
    for yc, xc, w, valid in _corners(px, py, H, W):
        flat = yc * W + xc
        vals = z2[bidx, :, flat]                       # (B, P, C)
        out += vals * (w * valid)[:, :, None]
    return out


def bilinear_gather_grad(z: np.ndarray, px: np.ndarray, py: np.ndarray,
                         dout: np.ndarray):
    """Gradients of bilinear_gather w.r.t. z, px and py."""
    B, C, H, W = z.shape
    z2 = z.reshape(B, C, H * W)
    bidx = np.arange(B)[:, None]

    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    wx1 = px - x0
    wx0 = 1.0 - wx1
    wy1 = py - y0
    wy0 = 1.0 - wy1

    dz2 = np.zeros_like(z2)
    vals = []
    for yc in (y0, y0 + 1):
        for xc in (x0, x0 + 1):
            valid = (yc >= 0) & (yc < H) & (xc >= 0) & (xc < W)
            flat = np.clip(yc, 0, H - 1) * W + np.clip(xc, 0, W - 1)
            vals.append(z2[bidx, :, flat] * valid[:, :, None])
            if yc is y0:
                wy = wy0
            else:
                wy = wy1
            wx = wx0 if xc is x0 else wx1
            np.add.at(dz2, (bidx, slice(None), flat),
                      dout * (wy * wx * valid)[:, :, None])
    v00, v01, v10, v11 = vals

    ddx = (v01 - v00) * wy0[:, :, None] + (v11 - v10) * wy1[:, :, None]
    ddy = (v10 - v00) * wx0[:, :, None] + (v11 - v01) * wx1[:, :, None]
    dpx = (dout * ddx).sum(axis=2)
    dpy = (dout * ddy).sum(axis=2)
    return dz2.reshape(z.shape), dpx, dpy
