"""The shipped synthetic benchmark: one frozen configuration, three seeds.

Forty classes scored by top-5 accuracy; incomes log-uniform on $100-$3000 so
the $300 evaluation buckets and the $600 adaptation split both fall inside
the range.
"""

from __future__ import annotations

from dataclasses import dataclass

from .adaptation import AddaConfig, AddaRun, run_adda, split_domains
from .dataset import DatasetManifest, SynthConfig, bin_by_income, generate_synthetic, holdout_split, resample_to_threshold
from .evaluation import FairnessReport, build_report
from .nn import MlpConfig, init_mlp, make_rng
from .training import TrainConfig, fit

SEEDS = (0, 1, 2)
NUM_CLASSES = 40
FEATURE_DIM = 16
TOPK = 5
BIN_WIDTH = 300.0
SAMPLING_THRESHOLD = 50
FOCAL_GAMMA = 5.0
HIDDEN_DIMS = (256, 256)
DROPOUT = 0.3
EPOCHS = 10
SPLIT_INCOME = 600.0

LOSS_FOR_METHOD = {"baseline": "nll", "sampled": "nll", "weighted": "weighted", "focal": "focal"}


def synth_config(seed: int, shift_strength: float = 2.0) -> SynthConfig:
    return SynthConfig(
        num_classes=NUM_CLASSES,
        feature_dim=FEATURE_DIM,
        samples_per_run=10_000,
        income_range=(100.0, 3000.0),
        shift_strength=shift_strength,
        imbalance_exponent=1.0,
        seed=seed,
    )


def benchmark_manifest(seed: int, shift_strength: float = 2.0) -> DatasetManifest:
    return generate_synthetic(synth_config(seed, shift_strength))


@dataclass(frozen=True)
class MethodRun:
    method: str
    seed: int
    report: FairnessReport


def run_method(manifest: DatasetManifest, method: str, seed: int) -> MethodRun:
    """Train one mitigation method on the training holdout; report on validation."""
    train, val = holdout_split(manifest)
    rng = make_rng(seed)
    if method == "sampled":
        train = resample_to_threshold(train, bin_by_income(train, BIN_WIDTH), SAMPLING_THRESHOLD, rng)
    model = init_mlp(MlpConfig(manifest.feature_dim, manifest.num_classes, HIDDEN_DIMS, DROPOUT), rng)
    cfg = TrainConfig(epochs=EPOCHS, loss=LOSS_FOR_METHOD[method], focal_gamma=FOCAL_GAMMA)
    res = fit(model, train.features, train.labels, cfg, rng, incomes=train.incomes)
    report, _ = build_report(res.model, val, TOPK, BIN_WIDTH)
    return MethodRun(method, seed, report)


def run_adda_benchmark(seed: int, shift_strength: float = 2.0, adversarial_steps: int = 500) -> AddaRun:
    manifest = benchmark_manifest(seed, shift_strength)
    split = split_domains(manifest, SPLIT_INCOME)
    cfg = AddaConfig.default(FEATURE_DIM, NUM_CLASSES, adversarial_steps=adversarial_steps, seed=seed)
    return run_adda(split, cfg, TrainConfig(epochs=EPOCHS), TrainConfig(epochs=5), k=TOPK)
