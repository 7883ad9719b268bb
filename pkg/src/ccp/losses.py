"""Soft supervised contrastive loss and credibility-weighted cross-entropy.

Both losses return ``(value, gradient)`` with the gradient computed in closed
form, so the training loop never needs an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import unit_rows

# floor on 1 - cos^2 so d(arccos)/dcos stays finite for (near-)parallel pairs
_SIN2_FLOOR = 1e-12


@dataclass
class MatchingMatrices:
    M: np.ndarray
    A: np.ndarray
    omega: np.ndarray


def _expand(q: np.ndarray) -> np.ndarray:
    return np.concatenate([q, q], axis=0)


def _check_batch(z: np.ndarray, q: np.ndarray | None, temperature: float) -> None:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if z.ndim != 2 or z.shape[0] % 2:
        raise ValueError("expected an even number of embeddings (two views per sample)")
    if q is not None and q.shape[0] * 2 != z.shape[0]:
        raise ValueError(
            f"{z.shape[0]} embeddings need {z.shape[0] // 2} credibility vectors, got {q.shape[0]}"
        )


def pair_indicator(n: int) -> np.ndarray:
    """Matching matrix that pairs only the two views ``i`` and ``i + n``."""
    M = np.zeros((2 * n, 2 * n))
    idx = np.arange(n)
    M[idx, idx + n] = 1.0
    M[idx + n, idx] = 1.0
    return M


def build_matching(z, q, temperature: float) -> MatchingMatrices:
    """Matching matrix ``M``, similarity kernel ``A`` and strengths over 2n views.

    ``z`` holds 2n embeddings (view ``i`` and ``i + n`` are twins) and ``q``
    the n clipped credibility vectors shared by each twin pair.
    """
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_batch(z, q, temperature)
    qq = _expand(q)
    u, _ = unit_rows(z)
    cos = np.clip(u @ u.T, -1.0, 1.0)
    A = np.exp((1.0 - np.arccos(cos) / np.pi) / temperature)
    np.fill_diagonal(A, 0.0)
    M = qq @ qq.T
    np.fill_diagonal(M, 0.0)
    return MatchingMatrices(M=M, A=A, omega=qq.max(axis=1))


def _contrastive(z: np.ndarray, M: np.ndarray, omega: np.ndarray, temperature: float):
    N = z.shape[0]
    u, norms = unit_rows(z)
    raw = u @ u.T
    cos = np.clip(raw, -1.0, 1.0)
    s = (1.0 - np.arccos(cos) / np.pi) / temperature
    # s <= 1/temperature, so shifting by it keeps exp() in range without a row max
    e = np.exp(s - 1.0 / temperature)
    e *= omega[None, :]
    np.fill_diagonal(e, 0.0)
    denom = e.sum(axis=1)

    row_mass = M.sum(axis=1)
    active = (row_mass > 0) & (omega > 0) & (denom > 0)
    w = np.zeros(N)
    w[active] = omega[active] / row_mass[active]
    log_denom = np.zeros(N)
    log_denom[active] = np.log(denom[active]) + 1.0 / temperature

    per_row = np.einsum("ij,ij->i", M, s) - row_mass * log_denom
    loss = -float(w @ per_row) / N

    # dL/ds_ij for the ordered pair (i, j)
    scale = np.zeros(N)
    scale[active] = w[active] * row_mass[active] / denom[active]
    G = (scale[:, None] * e - w[:, None] * M) / N
    sin2 = np.maximum(1.0 - cos * cos, _SIN2_FLOOR)
    H = G + G.T
    H *= 1.0 / (temperature * np.pi) / np.sqrt(sin2)
    H[np.abs(raw) >= 1.0] = 0.0
    np.fill_diagonal(H, 0.0)
    grad_u = H @ u
    radial = np.einsum("ij,ij->i", grad_u, u)[:, None]
    grad_z = (grad_u - radial * u) / norms[:, None]
    return loss, grad_z


def soft_contrastive_loss(z, q, temperature: float = 0.1, mode: str = "credibility"):
    """Credibility-weighted contrastive loss over 2n views and its gradient.

    ``mode="credibility"`` uses ``m_ij = q_i . q_j`` and ``omega_i = max(q_i)``.
    ``mode="simclr"`` ignores ``q`` and matches only twin views with unit
    strengths, which reduces the loss to the NT-Xent objective.
    """
    z = np.asarray(z, dtype=np.float64)
    if mode == "simclr":
        _check_batch(z, None, temperature)
        n = z.shape[0] // 2
        return _contrastive(z, pair_indicator(n), np.ones(2 * n), temperature)
    if mode != "credibility":
        raise ValueError(f"unknown mode {mode!r}")
    q = np.asarray(q, dtype=np.float64)
    _check_batch(z, q, temperature)
    qq = _expand(q)
    M = qq @ qq.T
    np.fill_diagonal(M, 0.0)
    return _contrastive(z, M, qq.max(axis=1), temperature)


def log_softmax(g: np.ndarray) -> np.ndarray:
    g = g - g.max(axis=1, keepdims=True)
    return g - np.log(np.exp(g).sum(axis=1, keepdims=True))


def soft_cross_entropy(logits, q):
    """Mean over samples of ``-sum_k q_k log softmax(g)_k`` and its gradient."""
    g = np.asarray(logits, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if g.shape != q.shape:
        raise ValueError(f"logits {g.shape} and credibilities {q.shape} differ in shape")
    n = g.shape[0]
    logp = log_softmax(g)
    loss = -float(np.sum(q * logp)) / n
    grad = (q.sum(axis=1, keepdims=True) * np.exp(logp) - q) / n
    return loss, grad
