"""Divergence-limited choice of how many weak pseudo-labels to reset."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateDistributionError(ValueError):
    pass


@dataclass
class SubsampleDecision:
    p: int
    confidences: np.ndarray
    selected_divergence: float
    order: np.ndarray  # sample positions sorted weakest-first

    def reset_indices(self, count_of: int | None = None) -> np.ndarray:
        n = self.order.size if count_of is None else count_of
        return self.order[: reset_count(self.p, n)]


def reset_count(p: int, n: int) -> int:
    return (p * n) // 100


def class_mass_distribution(qs) -> np.ndarray:
    qs = np.asarray(qs, dtype=np.float64)
    mass = qs.sum(axis=0)
    total = mass.sum()
    if total <= 0:
        raise DegenerateDistributionError("credibility vectors carry no mass")
    return mass / total


def kl_divergence_bits(P, Q) -> float:
    """``sum_k P_k log2(P_k / Q_k)``; ``inf`` when P has mass where Q has none."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    on = P > 0
    if np.any(Q[on] <= 0):
        return float("inf")
    return float(np.sum(P[on] * np.log2(P[on] / Q[on])))


def weakest_first(confidences: np.ndarray) -> np.ndarray:
    # stable sort: ties keep ascending sample index
    return np.argsort(confidences, kind="stable")


def choose_subsample(q_hats, qs, p_last: int, d_max: float) -> SubsampleDecision:
    """Largest percentage ``p < p_last`` whose reset keeps D_KL(P || Q) < d_max.

    ``q_hats`` are the averaged (unclipped) vectors that rank confidence,
    ``qs`` the clipped vectors whose class mass is compared. Inputs are left
    untouched; the caller performs the reset.
    """
    q_hats = np.asarray(q_hats, dtype=np.float64)
    qs = np.asarray(qs, dtype=np.float64)
    if not 1 <= p_last <= 100:
        raise ValueError(f"p_last must lie in [1, 100], got {p_last}")
    confidences = q_hats.max(axis=1)
    order = weakest_first(confidences)
    if d_max <= 0:
        return SubsampleDecision(0, confidences, 0.0, order)

    Q = class_mass_distribution(qs)
    n = qs.shape[0]
    ranked = qs[order]
    best_p, best_d = 0, 0.0
    for p in range(p_last):
        remaining = ranked[reset_count(p, n):].sum(axis=0)
        mass = remaining.sum()
        if mass <= 0:
            continue
        d = kl_divergence_bits(remaining / mass, Q)
        if d < d_max:
            best_p, best_d = p, d
    return SubsampleDecision(best_p, confidences, best_d, order)
