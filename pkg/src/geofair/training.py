"""Mini-batch supervised training of a model or a stack of models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .evaluation import topk_hits
from .losses import BatchLossResult, FocalConfig, focal_loss, nll_loss, weighted_batch_loss
from .nn import AdamState, MlpModel, Rng, adam_step, as_chain, chain_backward, chain_forward, predict_logits

LOSSES = ("nll", "weighted", "focal")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``max_steps`` caps the number of updates across all epochs; ``None``
    means run every epoch to completion.
    """

    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    loss: str = "nll"
    focal_gamma: float = 2.0
    max_steps: int | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate > 0 are required")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")
        FocalConfig(self.focal_gamma)


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    mean_loss: float
    train_accuracy: float


@dataclass
class TrainResult:
    models: tuple[MlpModel, ...]
    step_losses: list[float] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def model(self) -> MlpModel:
        return self.models[-1]


def batch_loss(config: TrainConfig, logits, labels, incomes) -> BatchLossResult:
    if config.loss == "weighted":
        return weighted_batch_loss(logits, labels, incomes)
    if config.loss == "focal":
        return focal_loss(logits, labels, FocalConfig(config.focal_gamma))
    return nll_loss(logits, labels)


def fit(
    models: MlpModel | Sequence[MlpModel],
    features: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    rng: Rng,
    incomes: np.ndarray | None = None,
) -> TrainResult:
    """Jointly train a chain of models (e.g. encoder then classifier).

    Each epoch shuffles with ``rng``; dropout masks also come from ``rng``.
    """
    chain = list(as_chain(models))
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if config.loss == "weighted" and incomes is None:
        raise ConfigError("weighted loss needs per-sample incomes")
    inc = None if incomes is None else np.asarray(incomes, dtype=np.float64)
    states = [AdamState.fresh(m, config.learning_rate) for m in chain]
    result = TrainResult(tuple(chain))
    n = len(y)
    step = 0
    if n == 0 or config.max_steps == 0:
        return result

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            idx = order[start : start + config.batch_size]
            logits, caches = chain_forward(chain, x[idx], training=True, rng=rng)
            res = batch_loss(config, logits, y[idx], None if inc is None else inc[idx])
            if not np.isfinite(res.value):
                raise NumericError(f"non-finite loss at step {step}")
            grads = chain_backward(chain, caches, res.grad)
            for i in range(len(chain)):
                chain[i], states[i] = adam_step(chain[i], grads[i], states[i])
            losses.append(res.value)
            step += 1
        if not losses:
            break
        result.step_losses.extend(losses)
        acc = float(topk_hits(predict_logits(chain, x), y, 1).mean()) if chain[-1].config.output_dim > 1 else 0.0
        result.epochs.append(EpochRecord(epoch, step, float(np.mean(losses)), acc))
    result.models = tuple(chain)
    return result


def accuracy(models, features, labels, k: int = 1) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(topk_hits(predict_logits(models, features), labels, k).mean())
