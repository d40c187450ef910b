"""Box geometry and bipartite matching of ground truths to queries."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "Box",
    "MatchResult",
    "MatchCoefficients",
    "box_to_corners",
    "iou",
    "giou",
    "giou_with_grad",
    "match_cost",
    "hungarian",
]

logger = logging.getLogger(__name__)


class Box(NamedTuple):
    """Normalized center-format box."""

    cx: float
    cy: float
    w: float
    h: float

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return box_to_corners(self)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]
    cost: float

    @property
    def matched_queries(self) -> frozenset[int]:
        return frozenset(q for _, q in self.pairs)

    def query_of(self, gt: int) -> int:
        for g, q in self.pairs:
            if g == gt:
                return q
        raise KeyError(gt)


@dataclass(frozen=True)
class MatchCoefficients:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


def box_to_corners(b) -> tuple[float, float, float, float]:
    cx, cy, w, h = b
    if w < 0 or h < 0:
        raise ValueError(f"box has negative size: {tuple(b)}")
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _areas(a, b):
    ax1, ay1, ax2, ay2 = box_to_corners(a)
    bx1, by1, bx2, by2 = box_to_corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, enclose


def iou(a, b) -> float:
    inter, union, _ = _areas(a, b)
    return inter / union if union > 0 else 0.0


def giou(a, b) -> float:
    """Generalized IoU in [-1, 1]; 0 (with a log message) for a zero-area hull."""
    inter, union, enclose = _areas(a, b)
    if enclose <= 0:
        logger.debug("giou: zero-area enclosing box for %s, %s", a, b)
        return 0.0
    return inter / union - (enclose - union) / enclose


def giou_with_grad(a, b) -> tuple[float, np.ndarray]:
    """GIoU and its gradient with respect to ``a`` in (cx, cy, w, h) form.

    Piecewise smooth; at the kinks of min/max the branch taken by the
    comparisons below is used.
    """
    cx, cy, w, h = (float(v) for v in a)
    ax1, ay1, ax2, ay2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    bx1, by1, bx2, by2 = box_to_corners(b)
    # gradient bookkeeping is done on corners (ax1, ay1, ax2, ay2)
    ix1, ix2 = max(ax1, bx1), min(ax2, bx2)
    iy1, iy2 = max(ay1, by1), min(ay2, by2)
    iw_raw, ih_raw = ix2 - ix1, iy2 - iy1
    iw, ih = max(0.0, iw_raw), max(0.0, ih_raw)
    d_iw = np.array([-float(ax1 > bx1), 0.0, float(ax2 < bx2), 0.0]) if iw_raw > 0 else np.zeros(4)
    d_ih = np.array([0.0, -float(ay1 > by1), 0.0, float(ay2 < by2)]) if ih_raw > 0 else np.zeros(4)
    inter = iw * ih
    d_inter = d_iw * ih + d_ih * iw

    area_a = (ax2 - ax1) * (ay2 - ay1)
    d_area_a = np.array([-(ay2 - ay1), -(ax2 - ax1), ay2 - ay1, ax2 - ax1])
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    d_union = d_area_a - d_inter

    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    d_cw = np.array([-float(ax1 < bx1), 0.0, float(ax2 > bx2), 0.0])
    d_ch = np.array([0.0, -float(ay1 < by1), 0.0, float(ay2 > by2)])
    enclose = cw * ch
    if enclose <= 0 or union <= 0:
        return 0.0, np.zeros(4)
    d_enclose = d_cw * ch + d_ch * cw

    value = inter / union - 1.0 + union / enclose
    d_corners = (
        (d_inter * union - inter * d_union) / union**2
        + (d_union * enclose - union * d_enclose) / enclose**2
    )
    # corners -> (cx, cy, w, h)
    jac = np.array([
        [1.0, 0.0, -0.5, 0.0],
        [0.0, 1.0, 0.0, -0.5],
        [1.0, 0.0, 0.5, 0.0],
        [0.0, 1.0, 0.0, 0.5],
    ])
    return float(value), d_corners @ jac


def match_cost(class_scores, pred_boxes, gt_leaves: Sequence[int], gt_boxes,
               coeffs: MatchCoefficients = MatchCoefficients(),
               leaf_ids: Sequence[int] | None = None) -> np.ndarray:
    """G x Q matrix of ``cls*(1 - y~[leaf]) + l1*|b_q - b_g|_1 + giou*(1 - GIoU)``.

    ``class_scores`` is the Q x N coupled activation matrix. When ``leaf_ids``
    is given every gt class must be among them.
    """
    scores = np.asarray(class_scores, dtype=float)
    pred = np.asarray(pred_boxes, dtype=float).reshape(-1, 4)
    gtb = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    leaves = np.asarray(gt_leaves, dtype=int)
    if leaf_ids is not None:
        allowed = set(int(i) for i in leaf_ids)
        bad = [int(l) for l in leaves if int(l) not in allowed]
        if bad:
            raise ValueError(f"ground-truth class ids are not leaves: {bad}")
    G, Q = len(leaves), len(pred)
    cost = np.zeros((G, Q))
    if coeffs.cls:
        cost += coeffs.cls * (1.0 - scores[:, leaves].T)
    if coeffs.l1:
        cost += coeffs.l1 * np.abs(gtb[:, None, :] - pred[None, :, :]).sum(-1)
    if coeffs.giou:
        g = np.array([[giou(pred[q], gtb[i]) for q in range(Q)] for i in range(G)]).reshape(G, Q)
        cost += coeffs.giou * (1.0 - g)
    return cost


def hungarian(cost) -> MatchResult:
    """Minimum-cost injective assignment of rows (gts) to columns (queries)."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    G, Q = cost.shape
    if G > Q:
        raise ValueError(f"more ground truths ({G}) than queries ({Q})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    if G == 0:
        return MatchResult((), 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(sorted((int(r), int(c)) for r, c in zip(rows, cols)))
    return MatchResult(pairs, float(cost[rows, cols].sum()))
