"""Synthetic HOI scenes: one "human" disc plus 1-3 colored objects whose
interaction label is a deterministic function of the rendered geometry.

Relations (interaction classes):
    0 point  - distant, not predominantly above
    1 above  - disjoint and predominantly above the human
    2 touch  - boxes overlap but the object is not contained
    3 hold   - object box fully inside the human box

Object classes are encoded by color; even classes render as rectangles,
odd ones as triangles. Ground-truth boxes are derived from each shape's own
pixel mask, so geometry, pixels and labels are consistent by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .core import ContractError
from .matching import GroundTruthInstance

PALETTE = [
    (0.90, 0.10, 0.10),
    (0.10, 0.80, 0.15),
    (0.15, 0.25, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.15, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.50, 0.10),
    (0.55, 0.15, 0.75),
]
HUMAN_COLOR = (0.98, 0.98, 0.98)
BACKGROUND = 0.12

RELATION_NAMES = ("point", "above", "touch", "hold")
NUM_RELATIONS = 4


@dataclass
class SyntheticScene:
    image: np.ndarray                        # (3, H, W) float64 in [0, 1]
    instances: list[GroundTruthInstance]
    seed: int
    geometry: dict                           # shape parameters behind the pixels


def disc_mask(H: int, W: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def rect_mask(H: int, W: int, box: tuple) -> np.ndarray:
    x1, y1, x2, y2 = box
    m = np.zeros((H, W), dtype=bool)
    m[y1:y2, x1:x2] = True
    return m


def triangle_mask(H: int, W: int, box: tuple) -> np.ndarray:
    """Up-pointing isoceles triangle inscribed in the box; apex touches the top
    edge and the base spans the full bottom edge, so its bbox equals the box."""
    x1, y1, x2, y2 = box
    m = np.zeros((H, W), dtype=bool)
    cxf = (x1 + x2 - 1) / 2.0
    rows = max(y2 - 1 - y1, 1)
    for y in range(y1, y2):
        t = (y - y1) / rows
        half = t * (x2 - x1 - 1) / 2.0
        lo = int(np.floor(cxf - half))
        hi = int(np.ceil(cxf + half))
        m[y, max(lo, x1):min(hi + 1, x2)] = True
    return m


def mask_bbox(mask: np.ndarray) -> np.ndarray:
    """Pixel bbox as continuous xyxy: [min_col, min_row, max_col+1, max_row+1]."""
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1.0, ys.max() + 1.0])


def shape_mask(H: int, W: int, shape: dict) -> np.ndarray:
    if shape["kind"] == "disc":
        return disc_mask(H, W, shape["cy"], shape["cx"], shape["r"])
    if shape["kind"] == "rect":
        return rect_mask(H, W, tuple(shape["box"]))
    if shape["kind"] == "triangle":
        return triangle_mask(H, W, tuple(shape["box"]))
    raise ContractError(f"unknown shape kind {shape['kind']!r}")


def classify_relation(human_box, object_box) -> int:
    """Deterministic relation from two xyxy boxes (pixel units)."""
    hx1, hy1, hx2, hy2 = human_box
    ox1, oy1, ox2, oy2 = object_box
    if ox1 >= hx1 and oy1 >= hy1 and ox2 <= hx2 and oy2 <= hy2:
        return 3
    iw = min(hx2, ox2) - max(hx1, ox1)
    ih = min(hy2, oy2) - max(hy1, oy1)
    if iw > 0 and ih > 0:
        return 2
    hcx, hcy = (hx1 + hx2) / 2, (hy1 + hy2) / 2
    ocx, ocy = (ox1 + ox2) / 2, (oy1 + oy2) / 2
    if (hcy - ocy) > abs(ocx - hcx):
        return 1
    return 0


def _boxes_disjoint(a, b, gap: float = 1.0) -> bool:
    return (a[2] + gap <= b[0] or b[2] + gap <= a[0]
            or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def _place_object(rng: np.random.Generator, relation: int, hbox: np.ndarray,
                  H: int, W: int):
    """Sample an integer pixel box realizing the target relation, or None."""
    hx1, hy1, hx2, hy2 = (int(v) for v in hbox)
    hcx, hcy = (hx1 + hx2) / 2, (hy1 + hy2) / 2
    if relation == 3:
        margin = 2
        avail_w = (hx2 - hx1) - 2 * margin
        avail_h = (hy2 - hy1) - 2 * margin
        if avail_w < 4 or avail_h < 4:
            return None
        ow = int(rng.integers(4, min(9, avail_w) + 1))
        oh = int(rng.integers(4, min(9, avail_h) + 1))
        x1 = int(rng.integers(hx1 + margin, hx2 - margin - ow + 1))
        y1 = int(rng.integers(hy1 + margin, hy2 - margin - oh + 1))
        return (x1, y1, x1 + ow, y1 + oh)
    ow = int(rng.integers(7, 15))
    oh = int(rng.integers(7, 15))
    if relation == 2:
        side = int(rng.integers(0, 4))
        ov = int(rng.integers(1, 4))
        if side == 0:    # object pokes out to the left
            x1 = hx1 + ov - ow
            y1 = int(rng.integers(hy1 - oh + 3, hy2 - 3 + 1))
        elif side == 1:  # right
            x1 = hx2 - ov
            y1 = int(rng.integers(hy1 - oh + 3, hy2 - 3 + 1))
        elif side == 2:  # top
            y1 = hy1 + ov - oh
            x1 = int(rng.integers(hx1 - ow + 3, hx2 - 3 + 1))
        else:            # bottom
            y1 = hy2 - ov
            x1 = int(rng.integers(hx1 - ow + 3, hx2 - 3 + 1))
        box = (x1, y1, x1 + ow, y1 + oh)
    elif relation == 1:
        gap = int(rng.integers(2, 6))
        y2 = hy1 - gap
        y1 = y2 - oh
        if y1 < 1:
            return None
        ocy = (y1 + y2) / 2
        spread = int(hcy - ocy) - 2
        if spread < 0:
            return None
        dx = int(rng.integers(-min(spread, 20), min(spread, 20) + 1))
        x1 = int(round(hcx + dx - ow / 2))
        box = (x1, y1, x1 + ow, y1 + oh)
    else:
        for _ in range(20):
            x1 = int(rng.integers(1, W - ow - 1))
            y1 = int(rng.integers(1, H - oh - 1))
            box = (x1, y1, x1 + ow, y1 + oh)
            if not _boxes_disjoint(box, (hx1, hy1, hx2, hy2), gap=3.0):
                continue
            ocx, ocy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
            if (hcy - ocy) <= abs(ocx - hcx) - 1:
                return box
        return None
    x1, y1, x2, y2 = box
    if x1 < 1 or y1 < 1 or x2 > W - 1 or y2 > H - 1:
        return None
    return box


def _build_scene(seed: int, index: int, attempt: int, H: int, W: int,
                 num_obj_classes: int) -> SyntheticScene | None:
    rng = np.random.default_rng([seed, index, attempt])
    r = int(rng.integers(7, 12))
    cy = int(rng.integers(r + 1, H - r - 2))
    cx = int(rng.integers(r + 1, W - r - 2))
    human_shape = {"kind": "disc", "cy": cy, "cx": cx, "r": r}
    hmask = shape_mask(H, W, human_shape)
    hbox = mask_bbox(hmask)

    num_objects = int(rng.integers(1, 4))
    objects = []
    for _ in range(num_objects):
        cls = int(rng.integers(0, num_obj_classes))
        relation = int(rng.integers(0, NUM_RELATIONS))
        placed = None
        for _ in range(40):
            box = _place_object(rng, relation, hbox, H, W)
            if box is None:
                continue
            kind = "rect" if cls % 2 == 0 else "triangle"
            shape = {"kind": kind, "box": list(box), "class": cls}
            obox = mask_bbox(shape_mask(H, W, shape))
            if classify_relation(hbox, obox) != relation:
                continue
            if any(not _boxes_disjoint(obox, prev_box) for prev_box, _, _ in objects):
                continue
            placed = (obox, shape, relation)
            break
        if placed is None:
            return None
        objects.append(placed)

    img = np.full((3, H, W), BACKGROUND)
    for c in range(3):
        img[c][hmask] = HUMAN_COLOR[c]
    for obox, shape, relation in objects:
        omask = shape_mask(H, W, shape)
        color = PALETTE[shape["class"]]
        for c in range(3):
            img[c][omask] = color[c]

    def to_cxcywh(box):
        x1, y1, x2, y2 = box
        return np.array([(x1 + x2) / 2 / W, (y1 + y2) / 2 / H,
                         (x2 - x1) / W, (y2 - y1) / H])

    instances = [GroundTruthInstance(human_box=to_cxcywh(hbox),
                                     object_box=to_cxcywh(obox),
                                     object_class=shape["class"],
                                     interaction_class=relation)
                 for obox, shape, relation in objects]
    geometry = {"human": human_shape,
                "objects": [shape for _, shape, _ in objects],
                "relations": [relation for _, _, relation in objects]}
    return SyntheticScene(image=img, instances=instances, seed=seed, geometry=geometry)


def generate(seed: int, count: int, H: int = 64, W: int = 64,
             num_obj_classes: int = 8, num_int_classes: int = 4) -> list[SyntheticScene]:
    """Deterministic scene list; impossible layouts retry with the next sub-seed."""
    if H % 32 or W % 32:
        raise ContractError(f"extents must be divisible by 32, got {H}x{W}")
    if num_int_classes != NUM_RELATIONS:
        raise ContractError(f"interaction label space is the {NUM_RELATIONS} spatial relations")
    if not 1 <= num_obj_classes <= len(PALETTE):
        raise ContractError(f"object classes limited to palette size {len(PALETTE)}")
    scenes = []
    for index in range(count):
        scene = None
        for attempt in range(32):
            scene = _build_scene(seed, index, attempt, H, W, num_obj_classes)
            if scene is not None:
                break
        if scene is None:
            raise RuntimeError(f"could not lay out scene {index} after 32 attempts")
        scenes.append(scene)
    return scenes


def hflip_scene(scene: SyntheticScene) -> SyntheticScene:
    """Mirror a scene horizontally (labels are invariant under the flip)."""
    img = scene.image[:, :, ::-1].copy()
    instances = []
    for inst in scene.instances:
        hb = inst.human_box.copy()
        ob = inst.object_box.copy()
        hb[0] = 1.0 - hb[0]
        ob[0] = 1.0 - ob[0]
        instances.append(GroundTruthInstance(human_box=hb, object_box=ob,
                                             object_class=inst.object_class,
                                             interaction_class=inst.interaction_class))
    return SyntheticScene(image=img, instances=instances, seed=scene.seed,
                          geometry={"flipped": True, **scene.geometry})


# -- on-disk dataset ---------------------------------------------------------


def save_dataset(scenes: list[SyntheticScene], out_dir, meta: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"meta": meta or {}, "scenes": []}
    for i, scene in enumerate(scenes):
        fname = f"scene_{i:05d}.bin"
        checkpoint.save_tensors(out_dir / fname, {"image": scene.image})
        index["scenes"].append({
            "file": fname,
            "seed": scene.seed,
            "geometry": scene.geometry,
            "instances": [{
                "human_box": inst.human_box.tolist(),
                "object_box": inst.object_box.tolist(),
                "object_class": inst.object_class,
                "interaction_class": inst.interaction_class,
            } for inst in scene.instances],
        })
    (out_dir / "index.json").write_text(json.dumps(index, indent=1))


def load_dataset(data_dir) -> tuple[list[SyntheticScene], dict]:
    data_dir = Path(data_dir)
    index = json.loads((data_dir / "index.json").read_text())
    scenes = []
    for rec in index["scenes"]:
        image = checkpoint.load_tensors(data_dir / rec["file"])["image"]
        instances = [GroundTruthInstance(
            human_box=np.array(inst["human_box"]),
            object_box=np.array(inst["object_box"]),
            object_class=int(inst["object_class"]),
            interaction_class=int(inst["interaction_class"]),
        ) for inst in rec["instances"]]
        scenes.append(SyntheticScene(image=image, instances=instances,
                                     seed=rec["seed"], geometry=rec.get("geometry", {})))
    return scenes, index.get("meta", {})
