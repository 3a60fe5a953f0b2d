"""Adversarial discriminative domain adaptation between income domains.

Pipeline:

1. :func:`train_source` fits an encoder and classifier on the high-income
   (source) domain.
2. :func:`adapt_target` trains a target encoder, initialised from the source
   encoder, so that a discriminator cannot tell its features on low-income
   (target) samples from source-encoder features. The source encoder is
   never updated.
3. :func:`evaluate_transfer` scores any encoder/classifier pair on both
   domains' validation holdouts.
4. :func:`finetune_classifier_on_target` retrains the classifier on frozen
   target-encoder features using target labels.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetManifest, holdout_split
from .errors import ConfigError, NumericError, ValidationError
from .evaluation import topk_hits
from .losses import bce_with_logits
from .nn import (
    AdamState,
    MlpConfig,
    MlpModel,
    Rng,
    adam_step,
    backward,
    forward,
    init_mlp,
    make_rng,
    predict_logits,
)
from .training import TrainConfig, fit


@dataclass(frozen=True)
class DomainSplit:
    source: DatasetManifest
    target: DatasetManifest
    split_income: float = 600.0
    validation_percent: int = 20

    def __post_init__(self):
        if len(self.source) == 0:
            raise ValidationError("source domain empty")
        if len(self.target) == 0:
            raise ValidationError("target domain empty")
        if np.any(self.source.incomes <= self.split_income):
            raise ValidationError("source samples must have income above split_income")
        if np.any(self.target.incomes > self.split_income):
            raise ValidationError("target samples must have income at or below split_income")

    def holdouts(self, domain: str) -> tuple[DatasetManifest, DatasetManifest]:
        """``(train, validation)`` for ``"source"`` or ``"target"``."""
        return holdout_split(getattr(self, domain), self.validation_percent)


def split_domains(manifest: DatasetManifest, split_income: float = 600.0, validation_percent: int = 20) -> DomainSplit:
    """Partition by income: above ``split_income`` is source, the rest target."""
    if len(manifest) == 0:
        raise ValidationError("cannot split an empty manifest")
    inc = manifest.incomes
    src = np.flatnonzero(inc > split_income)
    tgt = np.flatnonzero(inc <= split_income)
    if len(src) == 0:
        raise ValidationError(f"source domain empty: no income above {split_income:g}")
    if len(tgt) == 0:
        raise ValidationError(f"target domain empty: no income at or below {split_income:g}")
    return DomainSplit(manifest.subset(src), manifest.subset(tgt), float(split_income), validation_percent)


@dataclass(frozen=True)
class AddaConfig:
    encoder_config: MlpConfig
    classifier_config: MlpConfig
    discriminator_config: MlpConfig
    adversarial_steps: int = 500
    disc_steps_per_gen_step: int = 1
    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_beta1: float = 0.5
    seed: int = 0

    def __post_init__(self):
        enc, clf, disc = self.encoder_config, self.classifier_config, self.discriminator_config
        if disc.num_layers != 3:
            raise ConfigError(f"discriminator must have exactly 3 layers, got {disc.num_layers}")
        if disc.output_dim != 1:
            raise ConfigError("discriminator must have a scalar output")
        if disc.input_dim != enc.output_dim or clf.input_dim != enc.output_dim:
            raise ConfigError(
                f"encoder output {enc.output_dim} must feed classifier ({clf.input_dim}) "
                f"and discriminator ({disc.input_dim})"
            )
        if self.adversarial_steps < 0 or self.disc_steps_per_gen_step < 1 or self.batch_size < 1:
            raise ConfigError("adversarial_steps >= 0, disc_steps_per_gen_step >= 1 and batch_size >= 1 required")
        if not 0 <= self.adam_beta1 < 1:
            raise ConfigError("adam_beta1 must lie in [0, 1)")

    @classmethod
    def default(
        cls,
        feature_dim: int,
        num_classes: int,
        latent_dim: int = 64,
        hidden: int = 256,
        dropout_prob: float = 0.0,
        **kw,
    ) -> "AddaConfig":
        return cls(
            encoder_config=MlpConfig(feature_dim, latent_dim, (hidden,), dropout_prob),
            classifier_config=MlpConfig(latent_dim, num_classes, (hidden,), dropout_prob),
            discriminator_config=MlpConfig(latent_dim, 1, (hidden, hidden), 0.0),
            **kw,
        )

    def to_dict(self) -> dict:
        return {
            "encoder_config": self.encoder_config.to_dict(),
            "classifier_config": self.classifier_config.to_dict(),
            "discriminator_config": self.discriminator_config.to_dict(),
            "adversarial_steps": self.adversarial_steps,
            "disc_steps_per_gen_step": self.disc_steps_per_gen_step,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "adam_beta1": self.adam_beta1,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AddaConfig":
        d = dict(d)
        for key in ("encoder_config", "classifier_config", "discriminator_config"):
            d[key] = MlpConfig.from_dict(d[key])
        return cls(**d)


@dataclass
class SourceTraining:
    encoder: MlpModel
    classifier: MlpModel
    train_accuracy: float
    validation_accuracy: float


@dataclass
class AdversarialStep:
    step: int
    disc_loss: float
    gen_loss: float
    disc_acc: float


@dataclass
class AddaResult:
    source_encoder: MlpModel
    target_encoder: MlpModel
    classifier: MlpModel | None
    discriminator: MlpModel
    history: list[AdversarialStep] = field(default_factory=list)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "disc_loss", "gen_loss", "disc_acc"])
        for h in self.history:
            w.writerow([h.step, repr(h.disc_loss), repr(h.gen_loss), repr(h.disc_acc)])
        return buf.getvalue()


def _acc(models, manifest: DatasetManifest, k: int = 1) -> float:
    if len(manifest) == 0:
        return float("nan")
    return float(topk_hits(predict_logits(models, manifest.features), manifest.labels, k).mean())


def train_source(split: DomainSplit, config: AddaConfig, train_config: TrainConfig) -> SourceTraining:
    """Jointly fit encoder and classifier with NLL on the source holdout."""
    rng = make_rng(config.seed)
    encoder = init_mlp(config.encoder_config, rng)
    classifier = init_mlp(config.classifier_config, rng)
    train, val = split.holdouts("source")
    res = fit([encoder, classifier], train.features, train.labels, train_config, rng)
    encoder, classifier = res.models
    return SourceTraining(encoder, classifier, _acc(res.models, train), _acc(res.models, val))


def adapt_target(
    split: DomainSplit,
    source_encoder: MlpModel,
    config: AddaConfig,
    rng: Rng,
    classifier: MlpModel | None = None,
    discriminator: MlpModel | None = None,
    train_target: bool = True,
) -> AddaResult:
    """Adversarial phase with the inverted-label generator objective.

    Each step runs ``disc_steps_per_gen_step`` discriminator updates
    (source features labelled 1, target features 0) and then one target
    encoder update that labels its own features 1. ``disc_acc`` is measured
    on the last discriminator batch before that batch's update. With
    ``train_target=False`` only the discriminator learns; the generator
    loss is still recorded.
    """
    if source_encoder.config != config.encoder_config:
        raise ConfigError("source encoder architecture differs from encoder_config")
    src_train, _ = split.holdouts("source")
    tgt_train, _ = split.holdouts("target")
    xs, xt = src_train.features, tgt_train.features
    if len(xs) == 0 or len(xt) == 0:
        raise ValidationError("both domains need training samples for adaptation")

    target_encoder = MlpModel(source_encoder.config, source_encoder.weights, source_encoder.biases)
    disc = discriminator if discriminator is not None else init_mlp(config.discriminator_config, rng)
    # Heavy momentum lets the target encoder overshoot the discriminator and
    # drift even when the domains already match, hence the lower beta1.
    d_state = AdamState.fresh(disc, config.learning_rate, beta1=config.adam_beta1)
    t_state = AdamState.fresh(target_encoder, config.learning_rate, beta1=config.adam_beta1)
    b = config.batch_size
    disc_targets = np.concatenate([np.ones((b, 1)), np.zeros((b, 1))])
    history = []

    for step in range(config.adversarial_steps):
        for _ in range(config.disc_steps_per_gen_step):
            fs, _ = forward(source_encoder, xs[rng.integers(0, len(xs), b)])
            ft, _ = forward(target_encoder, xt[rng.integers(0, len(xt), b)])
            logits, cache = forward(disc, np.concatenate([fs, ft]), training=True, rng=rng)
            d_res = bce_with_logits(logits, disc_targets)
            d_acc = float(np.mean((logits > 0.0) == (disc_targets > 0.5)))
            disc, d_state = adam_step(disc, backward(disc, cache, d_res.grad), d_state)

        feats, t_cache = forward(target_encoder, xt[rng.integers(0, len(xt), b)], training=True, rng=rng)
        logits, d_cache = forward(disc, feats, training=True, rng=rng)
        g_res = bce_with_logits(logits, np.ones_like(logits))
        if not (np.isfinite(d_res.value) and np.isfinite(g_res.value)):
            raise NumericError(f"non-finite adversarial loss at step {step}")
        if train_target:
            d_feats = backward(disc, d_cache, g_res.grad).inputs
            target_encoder, t_state = adam_step(target_encoder, backward(target_encoder, t_cache, d_feats), t_state)
        history.append(AdversarialStep(step, d_res.value, g_res.value, d_acc))

    return AddaResult(source_encoder, target_encoder, classifier, disc, history)


def evaluate_transfer(
    split: DomainSplit, encoder: MlpModel, classifier: MlpModel, k: int = 1
) -> dict[str, float]:
    """Top-k accuracy of ``classifier(encoder(x))`` on each domain's validation holdout."""
    if not 1 <= k < classifier.config.output_dim:
        raise ValidationError(f"k must satisfy 1 <= k < {classifier.config.output_dim}, got {k}")
    return {
        "source": _acc([encoder, classifier], split.holdouts("source")[1], k),
        "target": _acc([encoder, classifier], split.holdouts("target")[1], k),
    }


def finetune_classifier_on_target(
    target_encoder: MlpModel,
    classifier: MlpModel,
    split: DomainSplit,
    train_config: TrainConfig,
    rng: Rng,
) -> MlpModel:
    """Retrain ``classifier`` with NLL on frozen target-encoder features."""
    train, _ = split.holdouts("target")
    feats = predict_logits(target_encoder, train.features)
    return fit(classifier, feats, train.labels, train_config, rng).model


@dataclass
class AddaRun:
    source: SourceTraining
    adaptation: AddaResult
    finetuned_classifier: MlpModel | None
    transfer: dict[str, dict[str, float]]


def run_adda(
    split: DomainSplit,
    config: AddaConfig,
    source_train: TrainConfig,
    finetune: TrainConfig | None = None,
    k: int = 1,
) -> AddaRun:
    """All four phases with one seed; ``transfer`` records each evaluation row."""
    src = train_source(split, config, source_train)
    rng = make_rng(config.seed + 1)
    adapted = adapt_target(split, src.encoder, config, rng, classifier=src.classifier)
    transfer = {
        "source_on_source": evaluate_transfer(split, src.encoder, src.classifier, k),
        "adapted_no_finetune": evaluate_transfer(split, adapted.target_encoder, src.classifier, k),
    }
    tuned = None
    if finetune is not None:
        tuned = finetune_classifier_on_target(adapted.target_encoder, src.classifier, split, finetune, rng)
        transfer["adapted_finetuned"] = evaluate_transfer(split, adapted.target_encoder, tuned, k)
    return AddaRun(src, adapted, tuned, transfer)
