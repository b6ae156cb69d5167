"""Probability utilities on plain float64 vectors."""
from __future__ import annotations

import numpy as np

from .errors import InfiniteDivergenceError, NumericDomainError
from .rng import SeededRng


def softmax(logits) -> np.ndarray:
    h = np.asarray(logits, dtype=np.float64)
    if h.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(h)):
        raise NumericDomainError("softmax input has non-finite entries")
    e = np.exp(h - h.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    h = np.asarray(logits, dtype=np.float64)
    shifted = h - h.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_divergence(p, q) -> float:
    """KL(p || q) with 0 * log(0 / q) = 0.

    Raises InfiniteDivergenceError when p puts mass where q has none.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise InfiniteDivergenceError("p_j > 0 where q_j == 0")
    kl = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
    return max(kl, 0.0)


def kl_from_logits(target: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Row-wise KL(target || softmax(logits)); target rows may contain zeros."""
    logq = log_softmax(logits)
    support = target > 0
    safe = np.where(support, target, 1.0)
    terms = np.where(support, target * (np.log(safe) - logq), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def sample_gaussian_diag(mean, var, rng: SeededRng, n: int | None = None) -> np.ndarray:
    """``mean + sqrt(var) * N(0, I)``; one vector, or ``n`` rows when given."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mean.shape != var.shape:
        raise ValueError("mean and variance lengths differ")
    if np.any(var < 0):
        raise ValueError("negative variance")
    shape = mean.shape if n is None else (n,) + mean.shape
    return mean + np.sqrt(var) * rng.normal(shape)
