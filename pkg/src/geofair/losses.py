"""Training objectives with analytic gradients with respect to logits.

Reductions differ on purpose: :func:`nll_loss`, :func:`focal_loss` and
:func:`bce_with_logits` average over the batch, while
:func:`weighted_batch_loss` *sums* income-scaled per-sample losses, so its
magnitude grows with batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class BatchLossResult:
    value: float
    grad: np.ndarray
    per_sample: np.ndarray


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValidationError(f"focal gamma must be finite and >= 0, got {self.gamma}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"need one label per row: {labels.shape} vs {logits.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        bad = int(labels[(labels < 0) | (labels >= logits.shape[1])][0])
        raise ValidationError(f"label {bad} outside [0, {logits.shape[1]})")
    return logits, labels.astype(np.int64)


def _nll_parts(logits, labels):
    logp = log_softmax(logits)
    rows = np.arange(len(labels))
    per = -logp[rows, labels]
    residual = softmax(logits)
    residual[rows, labels] -= 1.0
    return per, residual


def nll_loss(logits: np.ndarray, labels) -> BatchLossResult:
    """Mean negative log-likelihood of the softmax distribution."""
    logits, labels = _check_labels(logits, labels)
    per, residual = _nll_parts(logits, labels)
    n = len(labels)
    return BatchLossResult(float(per.mean()), residual / n, per)


def weighted_batch_loss(logits: np.ndarray, labels, incomes) -> BatchLossResult:
    """Income-weighted batch loss.

    ``mean(incomes) * sum_i nll_i / incomes[i]``: low-income samples weigh
    more, and the batch-mean factor keeps the value invariant to the income
    unit.
    """
    logits, labels = _check_labels(logits, labels)
    incomes = np.asarray(incomes, dtype=np.float64)
    if incomes.shape != labels.shape:
        raise ShapeError(f"need one income per row: {incomes.shape} vs {labels.shape}")
    if np.any(~(incomes > 0)):
        raise ValidationError("incomes must be strictly positive")
    per, residual = _nll_parts(logits, labels)
    w = incomes.mean() / incomes
    value = float(np.sum(w * per))
    return BatchLossResult(value, residual * w[:, None], per)


def focal_loss(logits: np.ndarray, labels, config: FocalConfig | float = FocalConfig()) -> BatchLossResult:
    """Mean of ``-(1 - p_t)**gamma * log(p_t)``.

    ``p_t`` is the softmax probability of the true class. The log term is
    taken from the log-softmax, so it stays finite without clamping.
    """
    if not isinstance(config, FocalConfig):
        config = FocalConfig(float(config))
    gamma = config.gamma
    logits, labels = _check_labels(logits, labels)
    n = len(labels)
    rows = np.arange(n)
    logp_t = log_softmax(logits)[rows, labels]
    probs = softmax(logits)
    p_t = probs[rows, labels]
    q = 1.0 - p_t
    modulator = q**gamma
    per = -modulator * logp_t

    # dL/dz_j = c * (s_j - [j == y]) with c = (1-p)^g - g p (1-p)^(g-1) log p
    residual = probs
    residual[rows, labels] -= 1.0
    if gamma == 0.0:
        return BatchLossResult(float(per.mean()), residual / n, per)
    with np.errstate(divide="ignore", invalid="ignore"):
        extra = gamma * p_t * q ** (gamma - 1.0) * logp_t
    c = modulator - np.where(q > 0.0, extra, 0.0)
    return BatchLossResult(float(per.mean()), residual * (c / n)[:, None], per)


def bce_with_logits(logits, targets) -> BatchLossResult:
    """Mean binary cross-entropy on raw logits (any shape, flattened)."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.shape != t.shape:
        raise ShapeError(f"logits {x.shape} and targets {t.shape} differ in shape")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValidationError("bce targets must be 0 or 1")
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    n = x.size
    return BatchLossResult(float(per.mean()), (sig - t) / n, per)
