"""Angular similarity and credibility-vector arithmetic."""

from __future__ import annotations

import numpy as np


def angular_similarity(z1, z2) -> float:
    """Angular similarity ``1 - arccos(cos(z1, z2)) / pi``, in [0, 1]."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError(f"shape mismatch: {z1.shape} vs {z2.shape}")
    n1 = np.linalg.norm(z1)
    n2 = np.linalg.norm(z2)
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("angular similarity is undefined for a zero vector")
    cos = np.clip(np.dot(z1, z2) / (n1 * n2), -1.0, 1.0)
    return float(1.0 - np.arccos(cos) / np.pi)


def unit_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalise ``z``; returns (unit rows, row norms)."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("angular similarity is undefined for a zero vector")
    return z / norms[:, None], norms


def pairwise_cosine(z: np.ndarray) -> np.ndarray:
    u, _ = unit_rows(z)
    return np.clip(u @ u.T, -1.0, 1.0)


def pairwise_angular(z: np.ndarray) -> np.ndarray:
    """Matrix of angular similarities between all rows of ``z``."""
    return 1.0 - np.arccos(pairwise_cosine(z)) / np.pi


def credibility_adjust(psi) -> np.ndarray:
    """Subtract from each entry the largest of the *other* entries.

    Works on a single vector or row-wise on a 2-D array. Exact ties at the
    maximum give zeros at every tied index.
    """
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape[-1] < 2:
        raise ValueError("credibility adjustment needs at least two classes")
    if not np.all(np.isfinite(psi)):
        raise ValueError("credibility adjustment needs finite entries")
    # the max over k' != k is the row max, except at the argmax where it is the runner-up
    top2 = -np.partition(-psi, 1, axis=-1)[..., :2]
    first = top2[..., 0:1]
    second = top2[..., 1:2]
    others_max = np.where(psi == first, second, first)
    return psi - others_max


def clip_credibility(q) -> np.ndarray:
    return np.clip(np.asarray(q, dtype=np.float64), 0.0, 1.0)


def strength(q) -> np.ndarray | float:
    """Maximum entry of a credibility vector (row-wise for 2-D input)."""
    q = np.asarray(q, dtype=np.float64)
    out = q.max(axis=-1)
    return float(out) if out.ndim == 0 else out


def clamped_label(label: int, num_classes: int) -> np.ndarray:
    """Raw credibility of a trusted label: +1 on, -1 off."""
    q = -np.ones(num_classes)
    q[label] = 1.0
    return q


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
