"""Mean average precision for HOI triplets.

A prediction is a true positive iff its human AND object boxes both reach
IoU > 0.5 with an unclaimed ground truth of the same HOI class (object class
x interaction class) and the action label is correct (implied by the class).
AP uses all-point interpolation; the Known-object setting restricts each
class's evaluation pool to images containing that object category.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matching import GroundTruthInstance, cxcywh_to_xyxy, iou_xyxy
from .model import HoiPrediction

IOU_THRESHOLD = 0.5


@dataclass
class EvalReport:
    setting: str
    per_class_ap: dict[tuple[int, int], float] = field(default_factory=dict)
    map_full: float = 0.0
    map_rare: float = float("nan")
    map_nonrare: float = float("nan")


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


@dataclass
class _Detection:
    image: int
    order: int
    confidence: float
    human_box: np.ndarray
    object_box: np.ndarray
    object_class: int
    interaction_class: int


def decode_prediction(p: HoiPrediction) -> _Detection | None:
    """Label and confidence of one query; None when any head argmaxes background."""
    ph = _softmax(p.human_logits)
    po = _softmax(p.object_logits)
    pi = _softmax(p.interaction_logits)
    h = int(ph.argmax())
    o = int(po.argmax())
    i = int(pi.argmax())
    if h != 1 or o == len(po) - 1 or i == len(pi) - 1:
        return None
    return _Detection(image=-1, order=-1,
                      confidence=float(ph[h] * po[o] * pi[i]),
                      human_box=cxcywh_to_xyxy(p.human_box),
                      object_box=cxcywh_to_xyxy(p.object_box),
                      object_class=o, interaction_class=i)


def average_precision(flags: list[bool], num_gt: int) -> float:
    """All-point interpolated AP from rank-ordered TP/FP flags."""
    if num_gt == 0:
        return float("nan")
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    ap = 0.0
    prev_r = 0.0
    for k in range(len(flags)):
        # envelope: max precision at any recall >= current
        p_env = precision[k:].max()
        if recall[k] > prev_r:
            ap += (recall[k] - prev_r) * p_env
            prev_r = recall[k]
    return float(ap)


def evaluate(preds_per_image: list[list[HoiPrediction]],
             gts_per_image: list[list[GroundTruthInstance]],
             setting: str = "default",
             train_class_counts: dict[tuple[int, int], int] | None = None,
             rare_threshold: int = 10) -> EvalReport:
    """Per-HOI-class AP and the full/rare/non-rare means.

    Rare classes are those with fewer than ``rare_threshold`` training
    instances; when no training counts are given the evaluated ground truths
    are counted instead.
    """
    setting = setting.lower()
    if setting not in ("default", "known"):
        raise ValueError(f"setting must be 'default' or 'known', got {setting!r}")
    if len(preds_per_image) != len(gts_per_image):
        raise ValueError("prediction/ground-truth image counts differ")

    gt_by_class: dict[tuple[int, int], dict[int, list[GroundTruthInstance]]] = {}
    images_with_object: dict[int, set[int]] = {}
    for img, gts in enumerate(gts_per_image):
        for g in gts:
            key = (g.object_class, g.interaction_class)
            gt_by_class.setdefault(key, {}).setdefault(img, []).append(g)
            images_with_object.setdefault(g.object_class, set()).add(img)

    detections: list[_Detection] = []
    for img, preds in enumerate(preds_per_image):
        for order, p in enumerate(preds):
            det = decode_prediction(p)
            if det is not None:
                det.image = img
                det.order = order
                detections.append(det)

    report = EvalReport(setting=setting)
    for key, gt_map in sorted(gt_by_class.items()):
        if setting == "known":
            pool = images_with_object[key[0]]
        else:
            pool = None
        dets = [d for d in detections
                if (d.object_class, d.interaction_class) == key
                and (pool is None or d.image in pool)]
        # stable rank: confidence desc, then image then query order
        dets.sort(key=lambda d: (-d.confidence, d.image, d.order))
        claimed: dict[int, list[bool]] = {img: [False] * len(lst) for img, lst in gt_map.items()}
        flags = []
        for d in dets:
            cand = gt_map.get(d.image, [])
            best, best_q = -1, 0.0
            for j, g in enumerate(cand):
                if claimed[d.image][j]:
                    continue
                qh = iou_xyxy(d.human_box, cxcywh_to_xyxy(g.human_box))
                qo = iou_xyxy(d.object_box, cxcywh_to_xyxy(g.object_box))
                q = min(qh, qo)
                if q > IOU_THRESHOLD and q > best_q:
                    best, best_q = j, q
            if best >= 0:
                claimed[d.image][best] = True
                flags.append(True)
            else:
                flags.append(False)
        num_gt = sum(len(lst) for lst in gt_map.values())
        report.per_class_ap[key] = average_precision(flags, num_gt)

    aps = list(report.per_class_ap.values())
    report.map_full = float(np.mean(aps)) if aps else 0.0

    if train_class_counts is None:
        train_class_counts = {key: sum(len(lst) for lst in gt_map.values())
                              for key, gt_map in gt_by_class.items()}
    rare = [ap for key, ap in report.per_class_ap.items()
            if train_class_counts.get(key, 0) < rare_threshold]
    nonrare = [ap for key, ap in report.per_class_ap.items()
               if train_class_counts.get(key, 0) >= rare_threshold]
    report.map_rare = float(np.mean(rare)) if rare else float("nan")
    report.map_nonrare = float(np.mean(nonrare)) if nonrare else float("nan")
    return report
