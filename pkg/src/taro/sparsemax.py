"""Sparsemax projection, sparsemax loss and the softmax + KL variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "NoPositivesError",
    "SparseProjection",
    "ObjectnessTarget",
    "sparsemax",
    "sparsemax_loss",
    "sparsemax_loss_grad",
    "softmax",
    "softmax_kl_loss",
]


class NoPositivesError(ValueError):
    """The objectness target has an empty positive set, so no loss is defined."""


@dataclass(frozen=True)
class SparseProjection:
    probabilities: np.ndarray
    support: frozenset[int]
    tau: float


@dataclass(frozen=True)
class ObjectnessTarget:
    """Equal-budget target over Q queries.

    ``q`` is uniform over ``positive_set``; with no positives it is all zero
    and :attr:`degenerate` is set.
    """

    q: np.ndarray
    positive_set: frozenset[int]

    @classmethod
    def from_positives(cls, positives, n_queries: int) -> "ObjectnessTarget":
        pos = frozenset(int(i) for i in positives)
        q = np.zeros(n_queries)
        if pos:
            q[sorted(pos)] = 1.0 / len(pos)
        return cls(q, pos)

    @property
    def degenerate(self) -> bool:
        return not self.positive_set


def _as_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("expected a non-empty 1-d logit vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z


def _threshold(z: np.ndarray) -> tuple[float, int]:
    z_sorted = np.sort(z)[::-1]
    cssv = np.cumsum(z_sorted)
    k = np.arange(1, z.size + 1)
    # strict inequality decides ties at the support boundary
    k_star = int(k[1.0 + k * z_sorted > cssv][-1])
    tau = (cssv[k_star - 1] - 1.0) / k_star
    return float(tau), k_star


def sparsemax(z) -> SparseProjection:
    """Euclidean projection of ``z`` onto the probability simplex.

    Sort-based: with z sorted descending, ``k* = max{k : 1 + k z_(k) > sum_{j<=k} z_(j)}``
    and ``tau = (sum_{j<=k*} z_(j) - 1) / k*``.
    """
    z = _as_logits(z)
    tau, _ = _threshold(z)
    p = np.maximum(z - tau, 0.0)
    support = frozenset(np.flatnonzero(p > 0).tolist())
    return SparseProjection(p, support, tau)


def _target_vector(q, n: int) -> np.ndarray:
    if isinstance(q, ObjectnessTarget):
        if q.degenerate:
            raise NoPositivesError("objectness target has no positive queries")
        q = q.q
    q = np.asarray(q, dtype=float)
    if q.shape != (n,):
        raise ValueError(f"target shape {q.shape} does not match logits ({n},)")
    if not np.any(q):
        raise NoPositivesError("objectness target has no positive queries")
    return q


def sparsemax_loss(z, q) -> float:
    """``-q.z + 1/2 sum_{j in S(z)} (z_j^2 - tau^2) + 1/2 ||q||^2``."""
    z = _as_logits(z)
    q = _target_vector(q, z.size)
    proj = sparsemax(z)
    s = np.fromiter(proj.support, dtype=int)
    return float(-q @ z + 0.5 * np.sum(z[s] ** 2 - proj.tau**2) + 0.5 * q @ q)


def sparsemax_loss_grad(z, q) -> np.ndarray:
    z = _as_logits(z)
    q = _target_vector(q, z.size)
    return sparsemax(z).probabilities - q


def softmax(z) -> np.ndarray:
    z = _as_logits(z)
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_kl_loss(z, q) -> tuple[float, np.ndarray]:
    """KL(q || softmax(z)) and its gradient ``softmax(z) - q``."""
    z = _as_logits(z)
    q = _target_vector(q, z.size)
    log_p = z - logsumexp(z)
    nz = q > 0
    loss = float(np.sum(q[nz] * (np.log(q[nz]) - log_p[nz])))
    return loss, np.exp(log_p) - q
