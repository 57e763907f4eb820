"""Bounding-box conversions, IoU and generalized IoU.

Scalar/array helpers operate on plain numpy values (used by matching costs
and evaluation); the ``*_t`` variants run through :mod:`feddet.ops` so the
detection loss can differentiate through box coordinates. Boxes are
``(cx, cy, w, h)`` normalized to the image, or ``(x1, y1, x2, y2)``.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ContractError
from .tensor import Tensor

__all__ = [
    "box_cxcywh_to_xyxy", "box_xyxy_to_cxcywh", "iou_xyxy", "giou_xyxy",
    "iou_matrix", "giou_matrix", "to_xyxy_t", "giou_pairs_t",
]


def box_cxcywh_to_xyxy(b) -> np.ndarray:
    cx, cy, w, h = np.asarray(b, dtype=np.float64)
    if w < 0 or h < 0:
        raise ContractError(f"box has negative extent: w={w}, h={h}")
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def box_xyxy_to_cxcywh(b) -> np.ndarray:
    x1, y1, x2, y2 = np.asarray(b, dtype=np.float64)
    if x2 < x1 or y2 < y1:
        raise ContractError(f"box is not well ordered: {b}")
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])


def _check_ordered(b, name: str) -> None:
    if b[2] < b[0] or b[3] < b[1]:
        raise ContractError(f"{name} box is not well ordered: {b}")


def iou_xyxy(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_ordered(a, "first")
    _check_ordered(b, "second")
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        # both boxes degenerate; identical point boxes count as a full match
        return 1.0 if np.array_equal(a, b) else 0.0
    return inter / union


def giou_xyxy(a, b) -> float:
    """IoU minus the hull-area penalty; in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_ordered(a, "first")
    _check_ordered(b, "second")
    hull_w = max(a[2], b[2]) - min(a[0], b[0])
    hull_h = max(a[3], b[3]) - min(a[1], b[1])
    hull = hull_w * hull_h
    if hull <= 0.0:
        if np.array_equal(a, b):
            return 1.0
        raise ContractError("zero-area enclosing hull for distinct boxes")
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    iou = inter / union if union > 0.0 else 0.0
    return iou - (hull - union) / hull


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``[N,4]`` by ``[M,4]`` xyxy boxes."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    iw = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]))
    ih = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]))
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU of ``[N,4]`` by ``[M,4]`` xyxy boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iou = iou_matrix(a, b)
    a4 = a[:, None, :]
    b4 = b[None, :, :]
    hull_w = np.maximum(a4[..., 2], b4[..., 2]) - np.minimum(a4[..., 0], b4[..., 0])
    hull_h = np.maximum(a4[..., 3], b4[..., 3]) - np.minimum(a4[..., 1], b4[..., 1])
    hull = hull_w * hull_h
    if np.any(hull <= 0):
        raise ContractError("zero-area enclosing hull in giou matrix")
    inter_w = np.maximum(0.0, np.minimum(a4[..., 2], b4[..., 2]) - np.maximum(a4[..., 0], b4[..., 0]))
    inter_h = np.maximum(0.0, np.minimum(a4[..., 3], b4[..., 3]) - np.maximum(a4[..., 1], b4[..., 1]))
    inter = inter_w * inter_h
    area_a = (a4[..., 2] - a4[..., 0]) * (a4[..., 3] - a4[..., 1])
    area_b = (b4[..., 2] - b4[..., 0]) * (b4[..., 3] - b4[..., 1])
    union = area_a + area_b - inter
    return iou - (hull - union) / hull


# ---------------------------------------------------------------------------
# differentiable variants (rows of matched pairs)

def _col(x: Tensor, j: int) -> Tensor:
    return ops.slice_axis(x, 1, j, j + 1)


def to_xyxy_t(boxes: Tensor) -> Tensor:
    """cxcywh -> xyxy for an ``[M,4]`` tensor, on the tape."""
    cx, cy, w, h = (_col(boxes, j) for j in range(4))
    hw = ops.mul_scalar(w, 0.5)
    hh = ops.mul_scalar(h, 0.5)
    return ops.concat(
        [ops.sub(cx, hw), ops.sub(cy, hh), ops.add(cx, hw), ops.add(cy, hh)],
        axis=1,
    )


def giou_pairs_t(a: Tensor, b: Tensor) -> Tensor:
    """Rowwise generalized IoU of aligned ``[M,4]`` xyxy tensors -> ``[M,1]``.

    Subgradients are zero at min/max ties and at zero-overlap boundaries;
    callers guarantee positive-area hulls (ground-truth boxes have w,h > 0).
    """
    ax1, ay1, ax2, ay2 = (_col(a, j) for j in range(4))
    bx1, by1, bx2, by2 = (_col(b, j) for j in range(4))
    iw = ops.relu(ops.sub(ops.minimum(ax2, bx2), ops.maximum(ax1, bx1)))
    ih = ops.relu(ops.sub(ops.minimum(ay2, by2), ops.maximum(ay1, by1)))
    inter = ops.mul(iw, ih)
    area_a = ops.mul(ops.sub(ax2, ax1), ops.sub(ay2, ay1))
    area_b = ops.mul(ops.sub(bx2, bx1), ops.sub(by2, by1))
    union = ops.sub(ops.add(area_a, area_b), inter)
    hull = ops.mul(
        ops.sub(ops.maximum(ax2, bx2), ops.minimum(ax1, bx1)),
        ops.sub(ops.maximum(ay2, by2), ops.minimum(ay1, by1)),
    )
    iou = ops.div(inter, union)
    return ops.sub(iou, ops.div(ops.sub(hull, union), hull))
