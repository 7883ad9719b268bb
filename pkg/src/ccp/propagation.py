"""Transductive propagation of credibility vectors inside one batch."""

from __future__ import annotations

import numpy as np

from .core import credibility_adjust, pairwise_angular


class BatchContractError(ValueError):
    """A batch lacks credibility mass for some class."""

    def __init__(self, cls: int, where: str = "batch"):
        super().__init__(f"class {cls} has zero credibility mass in the {where}")
        self.cls = cls


def class_similarities(z, q) -> np.ndarray:
    """Credibility-weighted mean similarity of every view to every class.

    ``z`` holds 2n embeddings, ``q`` the n clipped credibility vectors shared
    by twin views. Row ``v`` of the result excludes view ``v`` itself from
    both the weighted sum and the normaliser.
    """
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    qq = np.concatenate([q, q], axis=0)
    phi = pairwise_angular(z)
    np.fill_diagonal(phi, 0.0)
    numer = phi @ qq
    denom = qq.sum(axis=0)[None, :] - qq
    # the check on the full batch mass must look at the raw class totals
    totals = qq.sum(axis=0)
    for k in np.flatnonzero(totals <= 0):
        raise BatchContractError(int(k))
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = numer / denom
    # a view can be the only carrier of its class; then psi is undefined (nan)
    return psi


def propagate_batch(z, q, unlabeled) -> np.ndarray:
    """Propagated raw credibility vectors for the batch positions in ``unlabeled``.

    Returns an array of shape ``(len(unlabeled), K)``; row ``r`` is the mean
    of the adjusted class similarities of the two views of sample
    ``unlabeled[r]``.
    """
    unlabeled = np.asarray(unlabeled, dtype=np.int64)
    n = np.asarray(q).shape[0]
    psi = class_similarities(z, q)
    views = np.concatenate([unlabeled, unlabeled + n])
    sub = psi[views]
    if np.isnan(sub).any():
        rows, cols = np.nonzero(np.isnan(sub))
        raise BatchContractError(int(cols[0]), where=f"batch excluding view {int(views[rows[0]])}")
    adj = credibility_adjust(sub)
    m = unlabeled.size
    return 0.5 * (adj[:m] + adj[m:])
