"""Command-line entry point: ``geofair {generate,ingest,train,adapt,report}``.

Exit codes: 0 success, 1 validation/config error, 2 I/O error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .adaptation import AddaConfig, run_adda, split_domains
from .config import ExperimentConfig, load_config
from .dataset import (
    DatasetManifest,
    bin_by_income,
    generate_synthetic,
    histogram_lines,
    holdout_split,
    ingest_manifest,
    resample_to_threshold,
    write_manifest,
)
from .errors import CheckpointError, GeoFairError, NumericError
from .evaluation import build_report, write_report
from .nn import MlpConfig, init_mlp, load_model, make_rng, model_to_bytes, save_model
from .training import TrainConfig, accuracy, fit

LOSS_FOR_METHOD = {"baseline": "nll", "sampled": "nll", "weighted": "weighted", "focal": "focal"}


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def _load_manifest(cfg: ExperimentConfig) -> DatasetManifest:
    path = cfg.manifest_path
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return ingest_manifest(path)


def model_config(cfg: ExperimentConfig, manifest: DatasetManifest) -> MlpConfig:
    return MlpConfig(manifest.feature_dim, manifest.num_classes, cfg.hidden_dims, cfg.dropout_prob)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        loss=LOSS_FOR_METHOD[cfg.method],
        focal_gamma=cfg.focal_gamma,
    )


def cmd_generate(cfg: ExperimentConfig) -> int:
    manifest = generate_synthetic(cfg.synth)
    out = cfg.manifest_path
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out)
    print(f"wrote {len(manifest)} samples to {out}")
    print(f"shift_strength: {cfg.synth.shift_strength:g}")
    print(f"imbalance_exponent: {cfg.synth.imbalance_exponent:g}")
    print("\n".join(histogram_lines(manifest, cfg.bin_width)))
    return 0


def cmd_ingest(cfg: ExperimentConfig, source: str, enrich: bool, override_income: bool) -> int:
    src = Path(source)
    if not src.is_file():
        raise FileNotFoundError(f"input manifest not found: {src}")
    manifest = ingest_manifest(src, enrich=enrich, override_income=override_income)
    out = cfg.manifest_path
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out)
    with_cont = sum(s.continent is not None for s in manifest.samples)
    print(f"ingested {len(manifest)} samples ({with_cont} with continent) into {out}")
    print("\n".join(histogram_lines(manifest, cfg.bin_width)))
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    tcfg = train_config(cfg)
    manifest = _load_manifest(cfg)
    train, val = holdout_split(manifest, cfg.validation_percent)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(cfg.seed)
    if cfg.method == "sampled":
        width = cfg.sampling_bin_width or cfg.bin_width
        train = resample_to_threshold(train, bin_by_income(train, width), cfg.sampling_threshold, rng)
        write_manifest(train, out / "resampled_manifest.csv")
    model = init_mlp(model_config(cfg, manifest), rng)
    res = fit(model, train.features, train.labels, tcfg, rng, incomes=train.incomes)
    save_model(res.model, out / "model.ckpt")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "steps", "mean_loss", "train_accuracy"])
    for e in res.epochs:
        w.writerow([e.epoch, e.steps, repr(e.mean_loss), repr(e.train_accuracy)])
    _write(out / "train_log.csv", buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(res.step_losses):
        w.writerow([i, repr(v)])
    _write(out / "step_losses.csv", buf.getvalue())

    val_acc = accuracy(res.model, val.features, val.labels, 1)
    print(f"method={cfg.method} train_samples={len(train)} steps={len(res.step_losses)}")
    print(f"validation top-1 accuracy: {val_acc:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_adapt(cfg: ExperimentConfig) -> int:
    from .config import AddaSection

    section = cfg.adda or AddaSection()
    manifest = _load_manifest(cfg)
    split = split_domains(manifest, section.split_income, cfg.validation_percent)
    adda_cfg = AddaConfig.default(
        manifest.feature_dim,
        manifest.num_classes,
        latent_dim=section.latent_dim,
        hidden=section.hidden,
        dropout_prob=section.dropout_prob,
        adversarial_steps=section.adversarial_steps,
        disc_steps_per_gen_step=section.disc_steps_per_gen_step,
        adam_beta1=section.adam_beta1,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
    )
    src_tc = TrainConfig(epochs=section.source_epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate)
    ft_tc = None
    if section.finetune:
        ft_tc = TrainConfig(epochs=section.finetune_epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate)
    run = run_adda(split, adda_cfg, src_tc, ft_tc, k=section.topk)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    save_model(run.source.encoder, out / "source_encoder.ckpt")
    if model_to_bytes(run.adaptation.source_encoder) != (out / "source_encoder.ckpt").read_bytes():
        raise NumericError("source encoder changed during the adversarial phase")
    save_model(run.adaptation.target_encoder, out / "target_encoder.ckpt")
    save_model(run.source.classifier, out / "classifier.ckpt")
    save_model(run.adaptation.discriminator, out / "discriminator.ckpt")
    if run.finetuned_classifier is not None:
        save_model(run.finetuned_classifier, out / "classifier_finetuned.ckpt")
    _write(out / "adversarial_history.csv", run.adaptation.history_csv())
    summary = {
        "split_income": split.split_income,
        "source_samples": len(split.source),
        "target_samples": len(split.target),
        "k": section.topk,
        "source_train_accuracy": run.source.train_accuracy,
        "source_validation_accuracy": run.source.validation_accuracy,
        "transfer": run.transfer,
        "config": adda_cfg.to_dict(),
    }
    _write(out / "transfer.json", json.dumps(summary, indent=2) + "\n")

    hist = run.adaptation.history
    if hist:
        print(f"final discriminator accuracy: {hist[-1].disc_acc:.4f}")
    for row, accs in run.transfer.items():
        print(f"{row}: source={accs['source']:.4f} target={accs['target']:.4f}")
    return 0


def _load_chain(cfg: ExperimentConfig, manifest: DatasetManifest, paths: list[str]):
    if len(paths) == 1:
        return [load_model(paths[0], expected=model_config(cfg, manifest))]
    models = [load_model(p) for p in paths]
    if models[0].config.input_dim != manifest.feature_dim:
        raise CheckpointError(
            f"{paths[0]}: expects {models[0].config.input_dim} input features, manifest has {manifest.feature_dim}"
        )
    for (pa, a), (pb, b) in zip(zip(paths, models), zip(paths[1:], models[1:])):
        if a.config.output_dim != b.config.input_dim:
            raise CheckpointError(f"{pa} outputs {a.config.output_dim} values but {pb} expects {b.config.input_dim}")
    if models[-1].config.output_dim != manifest.num_classes:
        raise CheckpointError(
            f"{paths[-1]}: {models[-1].config.output_dim} outputs, manifest has {manifest.num_classes} classes"
        )
    return models


def cmd_report(cfg: ExperimentConfig, checkpoints: list[str], report_dir: str | None) -> int:
    manifest = _load_manifest(cfg)
    for p in checkpoints:
        if not Path(p).is_file():
            raise FileNotFoundError(f"checkpoint not found: {p}")
    models = _load_chain(cfg, manifest, checkpoints)
    _, val = holdout_split(manifest, cfg.validation_percent)
    report, hits = build_report(models, val, cfg.topk, cfg.bin_width, cfg.window)
    out = Path(report_dir) if report_dir else cfg.output_dir / "report"
    write_report(report, val, hits, out, svg=cfg.svg)
    print(f"overall top-{cfg.topk} accuracy: {report.overall_topk:.4f}")
    print(f"accuracy_range: {report.accuracy_range}")
    print(f"low_high_gap: {report.low_high_gap}")
    print(f"report: {out / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geofair", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="experiment config (JSON)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key; dotted keys reach sections (synth.seed=7)")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        p.add_argument("--out-dir", help="output directory (default: $GEOFAIR_OUT_DIR or ./geofair-out)")
        return p

    common(sub.add_parser("generate", help="write a seeded synthetic manifest"))
    p = common(sub.add_parser("ingest", help="validate and geo-enrich a manifest CSV"))
    p.add_argument("input", help="raw manifest CSV")
    p.add_argument("--enrich", action="store_true", help="resolve continents and fill missing incomes")
    p.add_argument("--override-income", action="store_true", help="replace every income with the continent proxy")
    common(sub.add_parser("train", help="train a classifier with the configured mitigation"))
    common(sub.add_parser("adapt", help="run the adversarial domain adaptation pipeline"))
    p = common(sub.add_parser("report", help="fairness report for trained checkpoint(s)"))
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint path; repeat for encoder then classifier")
    p.add_argument("--report-dir", help="where to write report files (default: OUT/report)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
        if args.command == "generate":
            overrides.append(f"synth.seed={args.seed}")
    if args.out_dir:
        overrides.append(f"out_dir={json.dumps(args.out_dir)}")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "ingest":
            return cmd_ingest(cfg, args.input, args.enrich, args.override_income)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "adapt":
            return cmd_adapt(cfg)
        return cmd_report(cfg, args.checkpoint, args.report_dir)
    except GeoFairError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
