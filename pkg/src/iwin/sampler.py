"""Fractional-coordinate feature sampling.

The separable kernel k(a, b) = max(0, 1 - |a - b|) makes the interpolation a
finite sum over at most 4 integer cells. Points outside the map read zeros
(zero-extension), so arbitrary learned offsets stay well-defined. Coordinates
are (x = column, y = row) with cell centers at integers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import Tensor, make_op


@dataclass(frozen=True)
class SamplePoint:
    x: float
    y: float


def kernel_k(a, b):
    """One-dimensional interpolation kernel max(0, 1 - |a - b|)."""
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(a, dtype=np.float64) - b))


def batched_sample(z: Tensor, px: Tensor, py: Tensor) -> Tensor:
    """Differentiable bilinear gather: z (B, C, H, W), px/py (B, P) -> (B, P, C).

    Gradients flow to the feature map everywhere and to the coordinates away
    from integer seams.
    """
    out = kernels.bilinear_gather(z.data, px.data, py.data)

    def vjp(g):
        dz, dpx, dpy = kernels.bilinear_gather_grad(
            z.data, px.data, py.data, np.ascontiguousarray(g))
        return (dz if z.requires_grad else None,
                dpx if px.requires_grad else None,
                dpy if py.requires_grad else None)

    return make_op(out, (z, px, py), vjp, "bilinear_gather")


def bilinear_sample(z: Tensor, p: SamplePoint | tuple) -> Tensor:
    """Sample one fractional point from a (C, H, W) map, returning a (C,) tensor."""
    if isinstance(p, tuple):
        p = SamplePoint(*p)
    zb = z.reshape((1,) + z.shape)
    px = Tensor(np.array([[p.x]]))
    py = Tensor(np.array([[p.y]]))
    out = batched_sample(zb, px, py)
    return out.reshape((z.shape[0],))
