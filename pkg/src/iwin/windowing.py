"""Regular and irregular window partition over feature maps.

Offsets are predicted per location by a 3x3 convolution, read at the regular
anchor positions, and added to those anchors to form fractional sample points.
Gathering rearranges each window's samples into a dense rectangle; scattering
writes attended values back to the regular anchor cells (an exact inverse on
valid slots). Maps whose extents are not multiples of the window size are
conceptually padded bottom/right; padded slots sample zeros and are flagged
in a validity mask so attention can ignore them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ContractError, DimensionError, Tensor, conv2d, make_op, mul, take_hw
from .sampler import batched_sample

# An offset field is a (2, H, W) tensor of per-location (dx, dy) displacements
# in feature-map cells; batched variants carry a leading batch axis.
OffsetField = Tensor


@dataclass
class WindowSet:
    """A partition of token locations into windows of fractional sample points."""

    window_size: int
    map_hw: tuple[int, int]
    pad_spec: tuple[int, int]                 # rows/cols of bottom/right padding
    grid_hw: tuple[int, int]                  # windows per axis
    anchors_y: np.ndarray                     # (num_windows, S*S) int, row-major
    anchors_x: np.ndarray
    valid: np.ndarray                         # (num_windows, S*S) bool
    points_x: Tensor = field(repr=False)      # (B, num_windows*S*S) fractional
    points_y: Tensor = field(repr=False)
    batched: bool = False

    @property
    def num_windows(self) -> int:
        return self.anchors_y.shape[0]

    def window_points(self, w: int, batch: int = 0) -> list:
        """Sample coordinates of one window as (x, y) pairs."""
        s2 = self.window_size ** 2
        xs = self.points_x.data[batch, w * s2:(w + 1) * s2]
        ys = self.points_y.data[batch, w * s2:(w + 1) * s2]
        return list(zip(xs.tolist(), ys.tolist()))


def _anchor_grid(H: int, W: int, S: int):
    gh = -(-H // S)
    gw = -(-W // S)
    wy, wx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    iy, ix = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    ay = (wy.reshape(-1, 1) * S + iy.reshape(1, -1))   # (nw, S*S)
    ax = (wx.reshape(-1, 1) * S + ix.reshape(1, -1))
    valid = (ay < H) & (ax < W)
    return gh, gw, ay, ax, valid


def _as_batched(z: Tensor, rank: int):
    if z.ndim == rank:
        return z.reshape((1,) + z.shape), False
    if z.ndim == rank + 1:
        return z, True
    raise DimensionError(f"expected rank {rank} or {rank + 1}, got {z.shape}")


def predict_offsets(z: Tensor, conv_weights: Tensor, conv_bias: Tensor | None = None) -> Tensor:
    """Per-location (dx, dy) displacements from a 3x3 convolution over the map."""
    zb, batched = _as_batched(z, 3)
    if conv_weights.shape[0] != 2 or conv_weights.shape[2:] != (3, 3):
        raise DimensionError(f"offset predictor weights must be (2, C, 3, 3), got {conv_weights.shape}")
    out = conv2d(zb, conv_weights, conv_bias, stride=1, padding=1)
    return out if batched else out.reshape(out.shape[1:])


def partition(z: Tensor, f_o: Tensor | None, window_size: int) -> WindowSet:
    """Split a (B?, C, H, W) map into windows of S*S fractional sample points.

    With f_o=None the points are the regular integer anchors; otherwise each
    anchor is displaced by the offset field value read at that anchor.
    """
    if window_size < 1:
        raise ContractError(f"window size must be >= 1, got {window_size}")
    zb, batched = _as_batched(z, 3)
    B, _, H, W = zb.shape
    gh, gw, ay, ax, valid = _anchor_grid(H, W, window_size)
    pad_spec = (gh * window_size - H, gw * window_size - W)

    ay_flat = ay.reshape(-1)
    ax_flat = ax.reshape(-1)
    base_x = np.broadcast_to(ax_flat.astype(np.float64), (B, ax_flat.size))
    base_y = np.broadcast_to(ay_flat.astype(np.float64), (B, ay_flat.size))

    if f_o is None:
        px = Tensor(base_x.copy())
        py = Tensor(base_y.copy())
    else:
        fb, f_batched = _as_batched(f_o, 3)
        if fb.shape[1] != 2 or fb.shape[2:] != (H, W) or fb.shape[0] != B:
            raise DimensionError(f"offset field {f_o.shape} does not match map {z.shape}")
        if batched != f_batched:
            raise DimensionError("feature map and offset field disagree on batching")
        vmask = valid.reshape(-1)
        offs = take_hw(fb, np.minimum(ay_flat, H - 1), np.minimum(ax_flat, W - 1))
        offs = mul(offs, Tensor(vmask.astype(np.float64)))     # padded anchors keep zero offset
        px = Tensor(base_x.copy()) + offs[:, 0, :]
        py = Tensor(base_y.copy()) + offs[:, 1, :]

    return WindowSet(window_size=window_size, map_hw=(H, W), pad_spec=pad_spec,
                     grid_hw=(gh, gw), anchors_y=ay, anchors_x=ax, valid=valid,
                     points_x=px, points_y=py, batched=batched)


def gather_windows(z: Tensor, ws: WindowSet) -> Tensor:
    """Bilinearly sample every window point: (B?, num_windows, S*S, C)."""
    zb, batched = _as_batched(z, 3)
    B, C, H, W = zb.shape
    if (H, W) != ws.map_hw or batched != ws.batched:
        raise DimensionError(f"window set built for {ws.map_hw}, map is {z.shape}")
    S2 = ws.window_size ** 2
    flat = batched_sample(zb, ws.points_x, ws.points_y)        # (B, nw*S2, C)
    out = flat.reshape((B, ws.num_windows, S2, C))
    return out if batched else out.reshape(out.shape[1:])


def scatter_windows(vals: Tensor, ws: WindowSet) -> Tensor:
    """Write per-slot vectors back to their regular anchor cells.

    Inverse of gather on valid slots: every map cell is written exactly once.
    Padded slots are dropped.
    """
    vb, batched = _as_batched(vals, 3)
    B, nw, S2, C = vb.shape
    if nw != ws.num_windows or S2 != ws.window_size ** 2 or batched != ws.batched:
        raise DimensionError(f"values {vals.shape} do not match window set")
    H, W = ws.map_hw
    vmask = ws.valid.reshape(-1)
    ys = ws.anchors_y.reshape(-1)[vmask]
    xs = ws.anchors_x.reshape(-1)[vmask]

    def vjp(g):
        dv = np.zeros((B, nw * S2, C), dtype=g.dtype)
        dv[:, vmask, :] = g[:, :, ys, xs].transpose(0, 2, 1)
        return (dv.reshape(B, nw, S2, C),)

    out = np.zeros((B, C, H, W), dtype=vb.data.dtype)
    out[:, :, ys, xs] = vb.data.reshape(B, nw * S2, C)[:, vmask, :].transpose(0, 2, 1)
    result = make_op(out, (vb,), vjp, "scatter_windows")
    return result if batched else result.reshape(result.shape[1:])
