"""Hierarchy-guided relabeling of unmatched queries as objectness positives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparsemax import ObjectnessTarget
from .taxonomy import TaxonomyForest

__all__ = ["RelabelOutcome", "nonleaf_score", "relabel", "objectness_target"]


@dataclass(frozen=True)
class RelabelOutcome:
    threshold: float | None
    relabeled: frozenset[int]
    per_query_nonleaf_score: np.ndarray


def nonleaf_score(ytil_row, forest: TaxonomyForest, reduce: str = "max"):
    """Aggregate of the coupled activations at non-leaf nodes.

    Works on a single row or a Q x N matrix. Returns 0 when the taxonomy has
    no non-leaf nodes.
    """
    ytil_row = np.asarray(ytil_row, dtype=float)
    block = ytil_row[..., : forest.n_nonleaf]
    if block.shape[-1] == 0:
        return np.zeros(ytil_row.shape[:-1]) if ytil_row.ndim > 1 else 0.0
    if reduce == "max":
        out = block.max(axis=-1)
    elif reduce == "mean":
        out = block.mean(axis=-1)
    else:
        raise ValueError(f"unknown reduction {reduce!r}")
    return out if ytil_row.ndim > 1 else float(out)


def relabel(ytil, matches, forest: TaxonomyForest, reduce: str = "max") -> RelabelOutcome:
    """Promote unmatched queries whose non-leaf score beats every matched one.

    The threshold is the smallest non-leaf score among matched queries; a
    query is relabeled only if its score is strictly greater. Without matches
    nothing is relabeled.
    """
    ytil = np.asarray(ytil, dtype=float)
    scores = np.atleast_1d(nonleaf_score(ytil, forest, reduce))
    pairs = getattr(matches, "pairs", matches)
    matched = sorted({int(q) for _, q in pairs})
    if not matched:
        return RelabelOutcome(None, frozenset(), scores)
    threshold = float(scores[matched].min())
    unmatched = np.setdiff1d(np.arange(len(scores)), matched)
    chosen = unmatched[scores[unmatched] > threshold]
    return RelabelOutcome(threshold, frozenset(chosen.tolist()), scores)


def objectness_target(matched, relabeled, n_queries: int) -> ObjectnessTarget:
    matched = frozenset(int(i) for i in matched)
    relabeled = frozenset(int(i) for i in relabeled)
    overlap = matched & relabeled
    if overlap:
        raise ValueError(f"queries both matched and relabeled: {sorted(overlap)}")
    return ObjectnessTarget.from_positives(matched | relabeled, n_queries)
