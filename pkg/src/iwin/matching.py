"""Set-prediction losses and one-to-one assignment.

The per-pair cost is a weighted sum of cross-entropy terms for the human,
object and interaction classes plus GIoU and L1 box regression terms for the
human and object boxes. A Hungarian solver finds the optimal assignment of
ground truths to queries; unmatched queries are supervised toward the
explicit background label of each head. The assignment is a constant of the
backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import ContractError, Tensor, abs_, log_softmax, maximum, minimum, mul, relu, scale, sub, take_at, take_rows
from .model import HoiPrediction, PredictionSet


@dataclass
class GroundTruthInstance:
    human_box: np.ndarray                  # (cx, cy, w, h) normalized
    object_box: np.ndarray
    object_class: int
    interaction_class: int
    human_class: int = 1


@dataclass
class CostWeights:
    beta1: float = 1.0
    alpha: tuple[float, float, float] = (1.0, 1.0, 1.0)   # human, object, interaction
    beta2: float = 2.5
    giou_weight: float = 2.0
    l1_weight: float = 5.0
    background_weight: float = 1.0


@dataclass
class Assignment:
    """sigma-hat: prediction index assigned to each ground truth."""

    pred_for_gt: np.ndarray
    total_cost: float


# -- boxes ---------------------------------------------------------------


def cxcywh_to_xyxy(box: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(box, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def giou(a, b) -> float:
    """Generalized IoU of two xyxy boxes, in (-1, 1].

    Degenerate boxes contribute IoU 0 but keep the enclosing-box penalty.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter_w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    inter_h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = inter_w * inter_h
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    iou = inter / union if union > 0 else 0.0
    enc_w = max(a[2], b[2]) - min(a[0], b[0])
    enc_h = max(a[3], b[3]) - min(a[1], b[1])
    enclose = enc_w * enc_h
    if enclose <= 0:
        return iou
    return iou - (enclose - union) / enclose


def iou_xyxy(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter_w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    inter_h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = inter_w * inter_h
    union = (max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
             + max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1]) - inter)
    return inter / union if union > 0 else 0.0


def _giou_pairs_tensor(pred_xyxy: Tensor, gt_xyxy: np.ndarray) -> Tensor:
    """Differentiable GIoU of row-aligned box pairs: (M, 4) x (M, 4) -> (M,)."""
    g = Tensor(gt_xyxy)
    ix1 = maximum(pred_xyxy[:, 0], g[:, 0])
    iy1 = maximum(pred_xyxy[:, 1], g[:, 1])
    ix2 = minimum(pred_xyxy[:, 2], g[:, 2])
    iy2 = minimum(pred_xyxy[:, 3], g[:, 3])
    inter = mul(relu(sub(ix2, ix1)), relu(sub(iy2, iy1)))
    area_p = mul(relu(sub(pred_xyxy[:, 2], pred_xyxy[:, 0])),
                 relu(sub(pred_xyxy[:, 3], pred_xyxy[:, 1])))
    area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    union = area_p + area_g - inter
    iou = inter / (union + Tensor(np.full(union.shape, 1e-12)))
    ex1 = minimum(pred_xyxy[:, 0], g[:, 0])
    ey1 = minimum(pred_xyxy[:, 1], g[:, 1])
    ex2 = maximum(pred_xyxy[:, 2], g[:, 2])
    ey2 = maximum(pred_xyxy[:, 3], g[:, 3])
    enclose = mul(sub(ex2, ex1), sub(ey2, ey1))
    penalty = sub(enclose, union) / (enclose + Tensor(np.full(union.shape, 1e-12)))
    return sub(iou, penalty)


def _box_to_xyxy_tensor(box: Tensor) -> Tensor:
    cx, cy, w, h = box[:, 0], box[:, 1], box[:, 2], box[:, 3]
    half_w = scale(w, 0.5)
    half_h = scale(h, 0.5)
    cols = [sub(cx, half_w), sub(cy, half_h), cx + half_w, cy + half_h]
    stacked = core.concat([c.reshape((-1, 1)) for c in cols], axis=1)
    return stacked


# -- per-pair cost ----------------------------------------------------------


def _log_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _box_loss_np(pred_cxcywh, gt_cxcywh, weights: CostWeights) -> float:
    l1 = np.abs(np.asarray(pred_cxcywh) - np.asarray(gt_cxcywh)).sum()
    g = giou(cxcywh_to_xyxy(pred_cxcywh), cxcywh_to_xyxy(gt_cxcywh))
    return weights.giou_weight * (1.0 - g) + weights.l1_weight * l1


def pair_cost(g: GroundTruthInstance, p: HoiPrediction,
              weights: CostWeights | None = None) -> float:
    """Matching cost of one (ground truth, prediction) pair."""
    weights = weights or CostWeights()
    n_obj = p.object_logits.shape[-1] - 1
    n_int = p.interaction_logits.shape[-1] - 1
    if not 0 <= g.object_class < n_obj:
        raise ContractError(f"object class {g.object_class} out of range [0, {n_obj})")
    if not 0 <= g.interaction_class < n_int:
        raise ContractError(f"interaction class {g.interaction_class} out of range [0, {n_int})")
    ah, ao, ar = weights.alpha
    cls_term = (ah * -_log_probs(p.human_logits)[g.human_class]
                + ao * -_log_probs(p.object_logits)[g.object_class]
                + ar * -_log_probs(p.interaction_logits)[g.interaction_class])
    box_term = (_box_loss_np(p.human_box, g.human_box, weights)
                + _box_loss_np(p.object_box, g.object_box, weights))
    return float(weights.beta1 * cls_term + weights.beta2 * box_term)


def cost_matrix(preds: list[HoiPrediction], gts: list[GroundTruthInstance],
                weights: CostWeights | None = None) -> np.ndarray:
    """(N preds) x (M ground truths) pairwise matching costs."""
    weights = weights or CostWeights()
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = pair_cost(g, p, weights)
    return out


# -- Hungarian assignment -----------------------------------------------------


def hungarian(cost: np.ndarray) -> Assignment:
    """Optimal one-to-one assignment of M ground truths to N >= M predictions.

    Classic O(n^3) potentials algorithm on the (M x N) transposed matrix;
    returns the prediction index chosen for each ground truth.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains non-finite entries")
    N, M = cost.shape
    if M == 0:
        return Assignment(pred_for_gt=np.zeros(0, dtype=np.intp), total_cost=0.0)
    if M > N:
        raise ContractError(f"more ground truths ({M}) than predictions ({N})")

    a = cost.T  # rows = ground truths, columns = predictions
    INF = np.inf
    u = np.zeros(M + 1)
    v = np.zeros(N + 1)
    way = np.zeros(N + 1, dtype=np.intp)
    match = np.full(N + 1, M, dtype=np.intp)  # column -> row, M = free

    for i in range(M):
        match[N] = i
        j0 = N
        minv = np.full(N + 1, INF)
        used = np.zeros(N + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = -1
            for j in range(N):
                if used[j]:
                    continue
                cur = a[i0, j] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(N + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == M:
                break
        while j0 != N:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    pred_for_gt = np.zeros(M, dtype=np.intp)
    for j in range(N):
        if match[j] != M:
            pred_for_gt[match[j]] = j
    total = float(sum(a[i, pred_for_gt[i]] for i in range(M)))
    return Assignment(pred_for_gt=pred_for_gt, total_cost=total)


# -- set loss -----------------------------------------------------------------


def _ce_rows(logits: Tensor, targets: np.ndarray, row_weights: np.ndarray) -> Tensor:
    """Weighted sum over rows of cross-entropy at the target column."""
    lp = log_softmax(logits, axis=-1)
    picked = take_at(lp, targets)
    return core.sum_(mul(scale(picked, -1.0), Tensor(row_weights)))


def set_loss(preds: PredictionSet, gts, weights: CostWeights | None = None) -> Tensor:
    """Bipartite-matched training loss, averaged over the batch.

    ``gts`` is a list of GroundTruthInstance for one image, or a list of such
    lists matching the prediction batch.
    """
    weights = weights or CostWeights()
    if len(gts) > 0 and isinstance(gts[0], GroundTruthInstance):
        gts = [gts]
    if len(gts) == 0:
        gts = [[]] * preds.batch_size
    B = preds.batch_size
    N = preds.num_queries
    if len(gts) != B:
        raise ContractError(f"{len(gts)} ground-truth lists for batch of {B}")

    n_obj = preds.object_logits.shape[-1] - 1
    n_int = preds.interaction_logits.shape[-1] - 1

    matched_rows: list[int] = []
    matched_h: list[int] = []
    matched_o: list[int] = []
    matched_i: list[int] = []
    matched_hbox: list[np.ndarray] = []
    matched_obox: list[np.ndarray] = []
    t_h = np.zeros(B * N, dtype=np.intp)           # background: no-human = 0
    t_o = np.full(B * N, n_obj, dtype=np.intp)     # background: last index
    t_i = np.full(B * N, n_int, dtype=np.intp)

    for b, gt_list in enumerate(gts):
        if len(gt_list) > N:
            raise ContractError(f"image {b}: {len(gt_list)} ground truths exceed {N} queries")
        if not gt_list:
            continue
        inst = preds.instances(b)
        cm = cost_matrix(inst, gt_list, weights)
        assign = hungarian(cm)
        for j, g in enumerate(gt_list):
            row = b * N + int(assign.pred_for_gt[j])
            matched_rows.append(row)
            matched_h.append(g.human_class)
            matched_o.append(g.object_class)
            matched_i.append(g.interaction_class)
            matched_hbox.append(np.asarray(g.human_box, dtype=np.float64))
            matched_obox.append(np.asarray(g.object_box, dtype=np.float64))
            t_h[row] = g.human_class
            t_o[row] = g.object_class
            t_i[row] = g.interaction_class

    matched_mask = np.zeros(B * N, dtype=bool)
    matched_mask[matched_rows] = True
    ah, ao, ar = weights.alpha
    w_match = weights.beta1
    w_bg = weights.background_weight
    row_w_h = np.where(matched_mask, w_match * ah, w_bg)
    row_w_o = np.where(matched_mask, w_match * ao, w_bg)
    row_w_i = np.where(matched_mask, w_match * ar, w_bg)

    hl = preds.human_logits.reshape((B * N, -1))
    ol = preds.object_logits.reshape((B * N, -1))
    il = preds.interaction_logits.reshape((B * N, -1))
    loss = _ce_rows(hl, t_h, row_w_h) + _ce_rows(ol, t_o, row_w_o) + _ce_rows(il, t_i, row_w_i)

    if matched_rows:
        rows = np.asarray(matched_rows, dtype=np.intp)
        hb = take_rows(preds.human_boxes.reshape((B * N, 4)), rows)
        ob = take_rows(preds.object_boxes.reshape((B * N, 4)), rows)
        gh = np.stack(matched_hbox)
        go = np.stack(matched_obox)
        box = Tensor(np.zeros(()))
        for pred_box, gt_box in ((hb, gh), (ob, go)):
            l1 = core.sum_(abs_(sub(pred_box, Tensor(gt_box))))
            gv = _giou_pairs_tensor(_box_to_xyxy_tensor(pred_box), cxcywh_to_xyxy(gt_box))
            box = box + scale(l1, weights.l1_weight) \
                + scale(core.sum_(sub(Tensor(np.ones(gv.shape)), gv)), weights.giou_weight)
        loss = loss + scale(box, weights.beta2)

    return scale(loss, 1.0 / B)
