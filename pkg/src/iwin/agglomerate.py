"""Irregular-window token agglomeration.

Every 2x2 irregular window groups 4 related tokens; their features are
concatenated (row-major over the anchors) to 4C and projected linearly to 2C,
so each stage quarters the token count and doubles the channel dimension.
With zero offsets this reduces exactly to fusing the 4 neighbouring tokens of
a regular 2x2 window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ContractError, DimensionError, Tensor, matmul, reshape, transpose
from .windowing import gather_windows, partition


@dataclass(frozen=True)
class StagePlan:
    stage_index: int
    input_dim: int
    output_dim: int
    tokens_in: tuple[int, int]
    tokens_out: tuple[int, int]


def agglomerate(z: Tensor, f_o: Tensor | None, w: Tensor) -> Tensor:
    """Fuse 2x2 irregular windows: (B?, C, H, W) -> (B?, 2C, ceil(H/2), ceil(W/2)).

    w is the (2C, 4C) projection applied to the concatenated window features.
    """
    batched = z.ndim == 4
    zb = z if batched else z.reshape((1,) + z.shape)
    B, C, H, W = zb.shape
    if w.shape != (2 * C, 4 * C):
        raise DimensionError(f"projection must be (2C, 4C) = ({2 * C}, {4 * C}), got {w.shape}")

    ws = partition(zb, f_o if f_o is None or f_o.ndim == 4 else f_o.reshape((1,) + f_o.shape), 2)
    g = gather_windows(zb, ws)                                  # (B, nw, 4, C)
    flat = reshape(g, (B, ws.num_windows, 4 * C))
    out = matmul(flat, transpose(w, (1, 0)))                    # (B, nw, 2C)
    gh, gw = ws.grid_hw
    out = transpose(reshape(out, (B, gh, gw, 2 * C)), (0, 3, 1, 2))
    return out if batched else out.reshape(out.shape[1:])


def plan_stages(H_img: int, W_img: int, D_c: int) -> list[StagePlan]:
    """Token/dimension bookkeeping for the three agglomerative stages."""
    if H_img % 4 or W_img % 4:
        raise ContractError(f"image extents must be divisible by 4, got {H_img}x{W_img}")
    plans = []
    h, w = H_img // 4, W_img // 4
    dim = D_c
    for i in (1, 2, 3):
        h_out, w_out = -(-h // 2), -(-w // 2)
        plans.append(StagePlan(stage_index=i, input_dim=dim, output_dim=2 * dim,
                               tokens_in=(h, w), tokens_out=(h_out, w_out)))
        h, w, dim = h_out, w_out, 2 * dim
    return plans
