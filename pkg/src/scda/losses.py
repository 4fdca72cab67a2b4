"""Confusion and classification losses, each returned with its gradient.

Losses built on the class correlation matrix return the gradient with
respect to the softmax outputs; cross-entropy returns the gradient with
respect to the logits. All logs are natural.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

BCE_CLAMP = 1e-7
_TINY = 1e-300
# row sums below this are treated as zero (their gradient would overflow)
DEGENERATE_ROW_SUM = 1e-200


def _check_probs(p, tol=1e-6):
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ContractError("rows must be probability vectors")


def entropy(probs_row) -> float:
    p = np.asarray(probs_row, dtype=np.float64)
    _check_probs(p)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def row_entropies(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    return -np.sum(np.where(p > 0, p * np.log(np.maximum(p, _TINY)), 0.0), axis=1)


@dataclass
class CorrelationMatrix:
    """Confidence-weighted class correlation ``r`` and its row-normalised ``r_hat``."""

    r: np.ndarray
    r_hat: np.ndarray
    weights: np.ndarray
    probs: np.ndarray
    entropies: np.ndarray
    row_sums: np.ndarray
    degenerate_rows: np.ndarray  # bool mask of rows with zero sum

    @property
    def size(self) -> int:
        return self.r.shape[0]


def correlation_matrix(probs) -> CorrelationMatrix:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError("probs must be 2-D")
    m, k = p.shape
    if m < 2:
        raise ContractError("need a batch of at least two samples")
    _check_probs(p)
    h = row_entropies(p)
    a = 1.0 + np.exp(-h)
    w = m * a / a.sum()
    r = p.T @ (w[:, None] * p)
    s = r.sum(axis=1)
    degenerate = s <= DEGENERATE_ROW_SUM
    r_hat = np.empty_like(r)
    ok = ~degenerate
    r_hat[ok] = r[ok] / s[ok, None]
    r_hat[degenerate] = 1.0 / k
    return CorrelationMatrix(r, r_hat, w, p, h, s, degenerate)


def correlation_backward(cm: CorrelationMatrix, g_rhat) -> np.ndarray:
    """Pull a gradient on ``r_hat`` back to the softmax outputs."""
    g = np.asarray(g_rhat, dtype=np.float64)
    p, w, s = cm.probs, cm.weights, cm.row_sums
    m = p.shape[0]
    ok = ~cm.degenerate_rows
    g_r = np.zeros_like(g)
    # r_hat_ij = r_ij / s_i  (uniform fallback rows are constant)
    g_r[ok] = (g[ok] - np.sum(g[ok] * cm.r_hat[ok], axis=1, keepdims=True)) / s[ok, None]
    # r = p^T diag(w) p
    d_p = w[:, None] * (p @ (g_r + g_r.T))
    g_w = np.einsum("ni,ij,nj->n", p, g_r, p)
    # w_n = m a_n / sum(a),  a_n = 1 + exp(-H_n)
    a = 1.0 + np.exp(-cm.entropies)
    total = a.sum()
    g_a = (m / total) * (g_w - np.dot(g_w, a) / total)
    g_h = -g_a * np.exp(-cm.entropies)
    d_p += g_h[:, None] * -(np.log(np.maximum(p, _TINY)) + 1.0)
    return d_p


def _check_known(cm: CorrelationMatrix, num_known: int):
    if num_known < 1 or cm.size < num_known + 1:
        raise ContractError("correlation matrix lacks the unknown block")


def unknown_confusion(cm: CorrelationMatrix, num_known: int) -> float:
    """Mean over known rows of the normalised correlation with the first unknown class."""
    _check_known(cm, num_known)
    return float(cm.r_hat[:num_known, num_known].mean())


def loss_adv(cm: CorrelationMatrix, num_known: int):
    """BCE of the known-to-unknown confusion against the target value 1/2."""
    _check_known(cm, num_known)
    p_raw = unknown_confusion(cm, num_known)
    p = min(max(p_raw, BCE_CLAMP), 1.0 - BCE_CLAMP)
    value = -(0.5 * np.log(p) + 0.5 * np.log(1.0 - p))
    g = np.zeros_like(cm.r_hat)
    if BCE_CLAMP < p_raw < 1.0 - BCE_CLAMP:
        dp = -0.5 / p + 0.5 / (1.0 - p)
        g[:num_known, num_known] = dp / num_known
    return float(value), correlation_backward(cm, g)


def loss_kcc(cm: CorrelationMatrix, num_known: int):
    """Off-diagonal mass inside the known-class block, averaged over known rows."""
    _check_known(cm, num_known)
    block = cm.r_hat[:num_known, :num_known]
    value = (block.sum() - np.trace(block)) / num_known
    g = np.zeros_like(cm.r_hat)
    g[:num_known, :num_known] = 1.0 / num_known
    g[np.arange(num_known), np.arange(num_known)] = 0.0
    return float(value), correlation_backward(cm, g)


def loss_tcc(cm: CorrelationMatrix):
    """Off-diagonal mass over every class, known and discovered."""
    k = cm.size
    value = (cm.r_hat.sum() - np.trace(cm.r_hat)) / k
    g = np.full_like(cm.r_hat, 1.0 / k)
    np.fill_diagonal(g, 0.0)
    return float(value), correlation_backward(cm, g)


def cross_entropy(probs, labels):
    """Mean ``-log p[label]``; gradient is with respect to the logits."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ShapeError("labels must have one entry per row of probs")
    if y.size == 0:
        raise ContractError("empty batch")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= p.shape[1]:
        raise ContractError(f"labels must be integers in [0, {p.shape[1]})")
    n = p.shape[0]
    picked = p[np.arange(n), y]
    value = float(-np.mean(np.log(np.maximum(picked, _TINY))))
    d_logits = p.copy()
    d_logits[np.arange(n), y] -= 1.0
    return value, d_logits / n


@dataclass
class LossBundle:
    """Per-batch loss values; ``None`` marks a term that is inactive."""

    l_s: float | None = None
    l_adv: float | None = None
    l_kcc: float | None = None
    l_tcc: float | None = None
    l_t: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in vars(self).items() if v is not None}


def _v(x):
    return 0.0 if x is None else x


def pretrain_objectives(b: LossBundle):
    """``(objective_F, objective_C)``: F maximises the adversarial term, C minimises it."""
    base = _v(b.l_s) + _v(b.l_kcc)
    return base - _v(b.l_adv), base + _v(b.l_adv)


def adapt_objective(b: LossBundle) -> float:
    return _v(b.l_s) + _v(b.l_t) + _v(b.l_tcc)
