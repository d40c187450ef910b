"""Hierarchy-aware classification head.

Each child activation is damped by its parent's sigmoid raised to a learnable
coupling strength, ``y~_c = y_c * y_p(c) ** alpha_c``; roots pass through.
The classification loss is a masked binary cross-entropy against multi-hot
targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .taxonomy import TaxonomyError, TaxonomyForest, multi_hot_target

__all__ = [
    "EPS",
    "StrengthParams",
    "ClassTargets",
    "sigmoid_activations",
    "hier_activation",
    "hier_activation_grads",
    "hier_activation_backward",
    "classification_loss",
    "build_class_targets",
]

logger = logging.getLogger(__name__)

EPS = 1e-6


@dataclass
class StrengthParams:
    """Coupling strengths, one per non-root node.

    Stored densely over all N nodes for indexing convenience; entries at
    roots are unused and kept at zero.
    """

    alpha: np.ndarray
    nonroot: np.ndarray

    @classmethod
    def init(cls, forest: TaxonomyForest, value: float = 1.0) -> "StrengthParams":
        nonroot = np.array([p is not None for p in forest.parent_of])
        alpha = np.where(nonroot, float(value), 0.0)
        return cls(alpha, nonroot)

    def copy(self) -> "StrengthParams":
        return StrengthParams(self.alpha.copy(), self.nonroot.copy())


@dataclass(frozen=True)
class ClassTargets:
    targets: np.ndarray
    mask: np.ndarray


def sigmoid_activations(logits) -> np.ndarray:
    return expit(np.asarray(logits, dtype=float))


def _topological(forest: TaxonomyForest) -> list[int]:
    return sorted((n.id for n in forest.nodes if forest.parent_of[n.id] is not None),
                  key=lambda i: forest.nodes[i].depth)


def _alpha_vector(alpha) -> np.ndarray:
    return alpha.alpha if isinstance(alpha, StrengthParams) else np.asarray(alpha, dtype=float)


def hier_activation(y, alpha, forest: TaxonomyForest, compound: bool = False) -> np.ndarray:
    """Apply the parent coupling to sigmoid activations ``y`` (shape Q x N).

    By default the raw parent sigmoid is used at every depth. With
    ``compound=True`` the already-coupled parent activation is used instead,
    so damping accumulates down the chain.
    """
    y = np.asarray(y, dtype=float)
    a = _alpha_vector(alpha)
    out = y.copy()
    for c in _topological(forest):
        p = forest.parent_of[c]
        base = np.clip(out[..., p] if compound else y[..., p], EPS, 1 - EPS)
        out[..., c] = y[..., c] * base ** a[c]
    return out


def hier_activation_grads(y, alpha, forest: TaxonomyForest):
    """Local partials of each coupled activation (raw-parent form).

    Returns three arrays shaped like ``y``: d y~_c / d y_c, d y~_c / d y_p(c)
    and d y~_c / d alpha_c. At roots they are (1, 0, 0).
    """
    y = np.asarray(y, dtype=float)
    a = _alpha_vector(alpha)
    d_self = np.ones_like(y)
    d_parent = np.zeros_like(y)
    d_alpha = np.zeros_like(y)
    for c in _topological(forest):
        p = forest.parent_of[c]
        yp = y[..., p]
        base = np.clip(yp, EPS, 1 - EPS)
        inside = (yp >= EPS) & (yp <= 1 - EPS)
        d_self[..., c] = base ** a[c]
        d_parent[..., c] = np.where(inside, a[c] * y[..., c] * base ** (a[c] - 1), 0.0)
        d_alpha[..., c] = y[..., c] * base ** a[c] * np.log(base)
    return d_self, d_parent, d_alpha


def hier_activation_backward(y, alpha, forest: TaxonomyForest, grad_out,
                             compound: bool = False):
    """Backpropagate ``grad_out`` (dL/dy~) to (dL/dy, dL/dalpha).

    The alpha gradient is dense over N with zeros at roots.
    """
    y = np.asarray(y, dtype=float)
    a = _alpha_vector(alpha)
    ytil = hier_activation(y, a, forest, compound=compound)
    g_til = np.array(grad_out, dtype=float, copy=True)
    g_y = np.zeros_like(y)
    g_alpha = np.zeros_like(a)
    for c in reversed(_topological(forest)):
        p = forest.parent_of[c]
        parent_val = ytil[..., p] if compound else y[..., p]
        base = np.clip(parent_val, EPS, 1 - EPS)
        inside = (parent_val >= EPS) & (parent_val <= 1 - EPS)
        g = g_til[..., c]
        g_y[..., c] += g * base ** a[c]
        g_alpha[c] += np.sum(g * ytil[..., c] * np.log(base))
        g_base = np.where(inside, g * a[c] * y[..., c] * base ** (a[c] - 1), 0.0)
        if compound:
            g_til[..., p] += g_base
        else:
            g_y[..., p] += g_base
    for r in forest.roots:
        g_y[..., r] += g_til[..., r]
    return g_y, g_alpha


def classification_loss(ytil, targets: ClassTargets, weights=None):
    """Mean BCE over supervised cells, and its gradient w.r.t. ``ytil``.

    ``weights`` optionally scales each node column; the mean is taken over the
    total supervised weight.
    """
    ytil = np.asarray(ytil, dtype=float)
    mask = np.asarray(targets.mask, dtype=float)
    t = np.asarray(targets.targets, dtype=float)
    w = mask if weights is None else mask * np.asarray(weights, dtype=float)[None, :]
    total = w.sum()
    if total <= 0:
        logger.warning("classification loss: every position is masked out")
        return 0.0, np.zeros_like(ytil)
    yc = np.clip(ytil, EPS, 1 - EPS)
    inside = (ytil >= EPS) & (ytil <= 1 - EPS)
    cell = -(t * np.log(yc) + (1 - t) * np.log(1 - yc))
    loss = float(np.sum(w * cell) / total)
    grad = np.where(inside, w * (yc - t) / (yc * (1 - yc)) / total, 0.0)
    return loss, grad


def build_class_targets(matches, forest: TaxonomyForest, n_queries: int,
                        leaves_of_gt) -> ClassTargets:
    """Targets and mask for all queries of one image.

    ``matches`` holds ``(gt_index, query_index)`` pairs and ``leaves_of_gt``
    maps gt index to its leaf node id. Matched rows are fully supervised with
    the multi-hot target; unmatched rows supervise only leaf columns, at 0.
    """
    n = len(forest)
    targets = np.zeros((n_queries, n))
    mask = np.zeros((n_queries, n))
    mask[:, forest.leaf_slice] = 1.0
    pairs = getattr(matches, "pairs", matches)
    for g, q in pairs:
        leaf = int(leaves_of_gt[g])
        if not forest.is_leaf(leaf):
            raise TaxonomyError(f"assigned class {forest.name(leaf)!r} is not a leaf")
        targets[q] = multi_hot_target(forest, leaf)
        mask[q] = 1.0
    return ClassTargets(targets, mask)
