"""Sampling-ancestry visualization for agglomerated tokens.

Each of the three agglomeration stages fuses 4 sampled points per output
token, so a final-stage token has 4^3 = 64 ancestor sample locations. Those
fractional locations live in successively coarser grids; composing them back
through per-stage coordinate fields (interpolated bilinearly, clamped at the
borders) and finally through the stem stride yields input-image coordinates.
With all offsets zero the 64 ancestors of a token form an exact regular
8x8 block of grid positions.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import ContractError, Tensor, no_grad
from .model import IwinModel
from .windowing import partition

STEM_STRIDE = 4


def _clamped_bilinear(field: np.ndarray, x: float, y: float) -> float:
    h, w = field.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    return float(field[y0, x0] * (1 - fy) * (1 - fx) + field[y0, x1] * (1 - fy) * fx
                 + field[y1, x0] * fy * (1 - fx) + field[y1, x1] * fy * fx)


def agglomeration_point_fields(model: IwinModel, image: Tensor) -> list[dict]:
    """Per-stage 2x2 sample-point fields captured from a forward pass.

    Each entry holds the output grid shape and, per output cell and slot,
    the fractional (x, y) sampled from that stage's input grid.
    """
    fields = []
    with no_grad():
        z = model.stem(image if image.ndim == 4 else image.reshape((1,) + image.shape))
        for stage_blocks, agg in model.stages:
            for block in stage_blocks:
                z = block(z)
            f_o = agg.offsets(z)
            ws = partition(z, f_o, 2)
            gh, gw = ws.grid_hw
            px = ws.points_x.data[0].reshape(gh, gw, 4)
            py = ws.points_y.data[0].reshape(gh, gw, 4)
            fields.append({"grid_hw": (gh, gw), "px": px, "py": py})
            z = agg(z)
    return fields


def ancestor_trace(model: IwinModel, image: Tensor) -> dict:
    """Every final token's location plus its 64 ancestors in image coordinates."""
    fields = agglomeration_point_fields(model, image)
    final_h, final_w = fields[-1]["grid_hw"]

    tokens = []
    for r in range(final_h):
        for c in range(final_w):
            pts = [(float(c), float(r))]
            for stage in reversed(range(3)):
                fx = fields[stage]["px"]
                fy = fields[stage]["py"]
                nxt = []
                for (x, y) in pts:
                    for n in range(4):
                        nxt.append((_clamped_bilinear(fx[:, :, n], x, y),
                                    _clamped_bilinear(fy[:, :, n], x, y)))
                pts = nxt
            ancestors = [(STEM_STRIDE * x + 1.5, STEM_STRIDE * y + 1.5) for x, y in pts]
            loc = (float(np.mean([a[0] for a in ancestors])),
                   float(np.mean([a[1] for a in ancestors])))
            tokens.append({"index": [r, c], "location": [loc[0], loc[1]],
                           "ancestors": [[a[0], a[1]] for a in ancestors]})
    H = image.shape[-2]
    W = image.shape[-1]
    return {"image_hw": [H, W], "final_grid": [final_h, final_w],
            "ancestors_per_token": 4 ** 3, "tokens": tokens}


def write_trace_json(trace: dict, path) -> None:
    Path(path).write_text(json.dumps(trace, indent=1))


def write_trace_ppm(trace: dict, image: np.ndarray, path) -> None:
    """Flat raster with ancestors (red) and token locations (blue) burned in."""
    arr = np.clip(image, 0.0, 1.0)
    H, W = arr.shape[-2], arr.shape[-1]
    rgb = (arr.transpose(1, 2, 0) * 255).astype(np.uint8).copy()

    def burn(x, y, color):
        xi, yi = int(round(x)), int(round(y))
        if 0 <= yi < H and 0 <= xi < W:
            rgb[yi, xi] = color

    for token in trace["tokens"]:
        for ax, ay in token["ancestors"]:
            burn(ax, ay, (255, 40, 40))
    for token in trace["tokens"]:
        burn(token["location"][0], token["location"][1], (40, 40, 255))

    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(rgb.tobytes())


def viz_windows(model: IwinModel, image: Tensor, out_json, out_ppm=None) -> dict:
    if image.ndim not in (3, 4):
        raise ContractError(f"expected a (3, H, W) image, got {image.shape}")
    trace = ancestor_trace(model, image)
    write_trace_json(trace, out_json)
    if out_ppm is not None:
        write_trace_ppm(trace, image.data if image.ndim == 3 else image.data[0], out_ppm)
    return trace
