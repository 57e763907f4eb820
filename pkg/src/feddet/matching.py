"""Set-prediction matching and loss.

Predictions are matched to ground-truth objects by a minimum-cost bipartite
assignment (Kuhn-Munkres with dual potentials), then the detection loss sums
classification cross entropy over all prediction slots with box L1 and
generalized-IoU penalties over the matched pairs. The assignment itself is
treated as a constant during backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import fsum
from typing import Sequence

import numpy as np

from . import ops
from .boxes import box_cxcywh_to_xyxy, giou_matrix, giou_pairs_t, to_xyxy_t
from .errors import ContractError
from .tensor import Tensor, no_grad

__all__ = ["GroundTruth", "Assignment", "LossWeights",
           "cost_matrix", "hungarian", "hungarian_loss"]


@dataclass(frozen=True)
class GroundTruth:
    """Target boxes (normalized cxcywh) and class labels for one image."""

    boxes: np.ndarray   # [M,4]
    labels: np.ndarray  # [M] ints

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "labels", labels)
        if len(boxes) != len(labels):
            raise ContractError(
                f"{len(boxes)} boxes but {len(labels)} labels"
            )
        if len(boxes):
            if boxes.min() <= 0.0 or boxes.max() >= 1.0:
                raise ContractError("box components must lie strictly in (0,1)")
            if np.any(boxes[:, 2:] <= 0.0):
                raise ContractError("ground-truth boxes need w,h > 0")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Assignment:
    """Injective prediction<->target pairing covering every target."""

    pairs: tuple          # ((pred_idx, tgt_idx), ...) sorted by pred_idx
    unmatched: tuple      # prediction indices left unpaired
    total: float = 0.0    # correctly-rounded sum of the matched entries


@dataclass(frozen=True)
class LossWeights:
    """Matching-cost and loss coefficients."""

    cls: float = 1.0
    box: float = 5.0
    giou: float = 2.0


def cost_matrix(class_probs: np.ndarray, boxes: np.ndarray, gt: GroundTruth,
                weights: LossWeights) -> np.ndarray:
    """Pairwise matching cost of N prediction slots against M targets.

    entry(i,j) = -cls*p_i(c_j) + box*l1(b_i, b_j) - giou*giou(b_i, b_j).
    """
    class_probs = np.asarray(class_probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    n = class_probs.shape[0]
    m = len(gt)
    if m > n:
        raise ContractError(f"{m} targets exceed {n} prediction slots")
    if m == 0:
        return np.zeros((n, 0))
    prob_term = -class_probs[:, gt.labels]                       # [N,M]
    l1_term = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(axis=2)
    pred_xyxy = np.stack([box_cxcywh_to_xyxy(b) for b in boxes])
    gt_xyxy = np.stack([box_cxcywh_to_xyxy(b) for b in gt.boxes])
    giou_term = -giou_matrix(pred_xyxy, gt_xyxy)
    return weights.cls * prob_term + weights.box * l1_term + weights.giou * giou_term


# ---------------------------------------------------------------------------
# assignment

def _min_assignment(cost: np.ndarray) -> tuple[list[int], list[float]]:
    """Optimal assignment of every row to a distinct column, rows <= cols.

    Kuhn-Munkres with dual potentials and shortest augmenting paths.
    Returns (column per row, list of selected entry values).
    """
    rows, cols = cost.shape
    if rows == 0:
        return [], []
    u = np.zeros(rows + 1)
    v = np.zeros(cols + 1)
    match = np.zeros(cols + 1, dtype=np.int64)   # column -> row (1-indexed)
    way = np.zeros(cols + 1, dtype=np.int64)
    for i in range(1, rows + 1):
        match[0] = i
        j0 = 0
        minv = np.full(cols + 1, np.inf)
        used = np.zeros(cols + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, cols + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(cols + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    col_of_row = [0] * rows
    for j in range(1, cols + 1):
        if match[j]:
            col_of_row[match[j] - 1] = j - 1
    entries = [float(cost[r, c]) for r, c in enumerate(col_of_row)]
    return col_of_row, entries


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost matching of all M targets to distinct predictions.

    ``cost`` is [N predictions x M targets], M <= N. Among all minimizers the
    lexicographically smallest pair list is returned (pairs sorted by
    prediction index). Totals are compared as correctly-rounded sums (fsum),
    so ties are resolved deterministically.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains non-finite entries")
    if m > n:
        raise ContractError(f"{m} targets exceed {n} prediction slots")
    if m == 0:
        return Assignment(pairs=(), unmatched=tuple(range(n)), total=0.0)
    if m == 1:
        p = int(np.argmin(cost[:, 0]))
        return Assignment(pairs=((p, 0),),
                          unmatched=tuple(i for i in range(n) if i != p),
                          total=float(cost[p, 0]))

    _, best_entries = _min_assignment(cost.T)   # targets as rows
    best_total = fsum(best_entries)

    # Fix predictions in ascending index to the smallest target that still
    # admits an optimal completion; this realizes the lexicographic tie-break.
    # Totals are fsums over raw entries, so equality checks are exact.
    chosen: list[tuple[int, int]] = []
    chosen_cost: list[float] = []
    remaining = list(range(m))
    for p in range(n):
        if not remaining:
            break
        picked = None
        for t in remaining:
            rest = [x for x in remaining if x != t]
            sub = cost[p + 1:, rest]
            if len(rest) > sub.shape[0]:
                continue
            _, rest_entries = (_min_assignment(sub.T) if rest else ([], []))
            candidate = fsum(chosen_cost + [float(cost[p, t])] + rest_entries)
            if candidate == best_total:
                picked = t
                break
        if picked is None:
            continue   # every optimal completion leaves p unmatched
        chosen.append((p, picked))
        chosen_cost.append(float(cost[p, picked]))
        remaining.remove(picked)
    if remaining:
        raise ContractError("assignment refinement lost feasibility")
    pairs = tuple(chosen)
    matched_preds = {p for p, _ in pairs}
    return Assignment(pairs=pairs,
                      unmatched=tuple(i for i in range(n) if i not in matched_preds),
                      total=fsum(chosen_cost))


# ---------------------------------------------------------------------------
# loss

def hungarian_loss(preds, gts: Sequence[GroundTruth], weights: LossWeights,
                   eos_coef: float) -> Tensor:
    """Batch-averaged detection loss over matched set predictions.

    Per image: classification cross entropy over all N slots (unmatched slots
    target the no-object class, weighted by ``eos_coef``), plus
    ``weights.box`` * L1 and ``weights.giou`` * (1 - giou) averaged over the
    matched pairs. The matching is computed on detached values.
    """
    b, n, cp1 = preds.class_logits.shape
    if len(gts) != b:
        raise ContractError(f"{b} prediction rows but {len(gts)} ground truths")
    noobj = cp1 - 1
    per_image = []
    for i in range(b):
        logits = ops.reshape(
            ops.slice_axis(preds.class_logits, 0, i, i + 1), (n, cp1))
        boxes = ops.reshape(ops.slice_axis(preds.boxes, 0, i, i + 1), (n, 4))
        gt = gts[i]
        with no_grad():
            probs = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            assign = hungarian(cost_matrix(probs, boxes.data, gt, weights))

        targets = np.full(n, noobj, dtype=np.int64)
        ce_weights = np.full(n, eos_coef)
        for p, t in assign.pairs:
            targets[p] = gt.labels[t]
            ce_weights[p] = 1.0
        ce = ops.cross_entropy_with_logits(logits, targets)
        wsum = float(ce_weights.sum())
        class_term = ops.mul_scalar(
            ops.sum_all(ops.mul(ce, Tensor(ce_weights))), 1.0 / wsum)

        if assign.pairs:
            pred_idx = [p for p, _ in assign.pairs]
            tgt_idx = [t for _, t in assign.pairs]
            m = len(pred_idx)
            pb = ops.take_rows(boxes, pred_idx)
            gb = Tensor(gt.boxes[tgt_idx])
            l1 = ops.l1_loss(pb, gb, "sum")
            gi = giou_pairs_t(to_xyxy_t(pb), Tensor(np.stack(
                [box_cxcywh_to_xyxy(v) for v in gt.boxes[tgt_idx]])))
            giou_term = ops.add_scalar(ops.neg(ops.sum_all(gi)), float(m))
            box_term = ops.mul_scalar(
                ops.add(ops.mul_scalar(l1, weights.box),
                        ops.mul_scalar(giou_term, weights.giou)),
                1.0 / m)
            per_image.append(ops.add(class_term, box_term))
        else:
            per_image.append(class_term)

    total = per_image[0]
    for extra in per_image[1:]:
        total = ops.add(total, extra)
    return ops.mul_scalar(total, 1.0 / b)
