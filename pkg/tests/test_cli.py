import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from geofair.cli import main
from geofair.config import METHOD_KEYS, ExperimentConfig, config_from_dict, load_config
from geofair.dataset import holdout_split, ingest_manifest, write_manifest
from geofair.errors import ConfigError
from geofair.nn import MlpConfig, MlpModel, init_mlp, load_model, make_rng, save_model

RAW = (
    "id,label,income,latitude,longitude,continent,f0,f1\n"
    "paris,0,,48.85,2.35,,0.1,0.2\n"
    "nairobi,1,400,-1.29,36.82,,0.3,0.4\n"
)
CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = {
    "epochs": 2,
    "batch_size": 64,
    "hidden_dims": [16],
    "topk": 3,
    "synth": {"num_classes": 6, "feature_dim": 4, "samples_per_run": 1200, "income_range": [100, 3000], "seed": 4},
    "adda": {"latent_dim": 8, "hidden": 32, "adversarial_steps": 40, "source_epochs": 2, "finetune_epochs": 1},
}


def write_config(path, **changes):
    cfg = json.loads(json.dumps(SMALL))
    for k, v in changes.items():
        if v is None:
            cfg.pop(k, None)
        else:
            cfg[k] = v
    path.write_text(json.dumps(cfg))
    return str(path)


def run(*args):
    return main([str(a) for a in args])


def snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(Path(directory).rglob("*")) if p.is_file()}


@pytest.fixture
def workspace(tmp_path):
    cfg = write_config(tmp_path / "exp.json")
    out = tmp_path / "out"
    assert run("generate", "-c", cfg, "--out-dir", out) == 0
    return cfg, out


# configuration


def test_defaults_and_env(monkeypatch):
    monkeypatch.delenv("GEOFAIR_OUT_DIR", raising=False)
    assert load_config(None).output_dir == Path("geofair-out")
    monkeypatch.setenv("GEOFAIR_OUT_DIR", "/tmp/somewhere")
    cfg = load_config(None)
    assert cfg.output_dir == Path("/tmp/somewhere")
    assert cfg.manifest_path == Path("/tmp/somewhere/manifest.csv")
    assert load_config(None, ["out_dir=elsewhere"]).output_dir == Path("elsewhere")


@pytest.mark.parametrize("key,owner", sorted(METHOD_KEYS.items()))
def test_method_specific_keys_rejected_for_other_methods(key, owner):
    with pytest.raises(ConfigError, match=key):
        config_from_dict({"method": "baseline", key: 3})
    assert config_from_dict({"method": owner, key: 3}).method == owner


@pytest.mark.parametrize(
    "raw,match",
    [
        ({"method": "dropout"}, "method"),
        ({"colour": 1}, "colour"),
        ({"synth": {"classes": 3}}, "synth"),
        ({"adda": {"steps": 3}}, "adda"),
        ({"epochs": 0}, "epochs"),
        ({"method": "focal", "focal_gamma": -1}, "focal_gamma"),
        ({"validation_percent": 100}, "validation_percent"),
    ],
)
def test_invalid_configs(raw, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(raw)


def test_overrides_are_parsed_as_json(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.json"), ["synth.seed=9", "hidden_dims=[3,2]", "method=focal"])
    assert cfg.synth.seed == 9 and cfg.hidden_dims == (3, 2) and cfg.method == "focal"
    with pytest.raises(ConfigError):
        load_config(None, ["no-equals-sign"])


def test_config_round_trips_through_dict():
    cfg = ExperimentConfig(method="sampled", sampling_threshold=50)
    assert config_from_dict(cfg.to_dict()) == cfg


def test_shipped_configs_load():
    import geofair.benchmark as bm

    names = sorted(p.name for p in CONFIGS.glob("*.json"))
    assert names == ["adda.json"] + [f"benchmark-{m}.json" for m in ("baseline", "focal", "sampled", "weighted")]
    for method in ("baseline", "weighted", "sampled", "focal"):
        cfg = load_config(CONFIGS / f"benchmark-{method}.json")
        assert cfg.method == method
        assert cfg.synth == bm.synth_config(0)
        assert (cfg.topk, cfg.bin_width, cfg.hidden_dims, cfg.epochs) == (bm.TOPK, bm.BIN_WIDTH, bm.HIDDEN_DIMS, bm.EPOCHS)
    assert load_config(CONFIGS / "benchmark-focal.json").focal_gamma == bm.FOCAL_GAMMA
    assert load_config(CONFIGS / "benchmark-sampled.json").sampling_threshold == bm.SAMPLING_THRESHOLD
    assert load_config(CONFIGS / "adda.json").adda.split_income == bm.SPLIT_INCOME


# exit codes


def test_config_error_exits_1_before_compute(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", sampling_threshold=50)
    assert run("train", "-c", cfg, "--out-dir", tmp_path / "o") == 1
    assert "sampling_threshold" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_files_exit_2(tmp_path, capsys):
    assert run("train", "-c", tmp_path / "nope.json") == 2
    assert "nope.json" in capsys.readouterr().err
    cfg = write_config(tmp_path / "c.json")
    assert run("train", "-c", cfg, "--out-dir", tmp_path / "empty") == 2
    assert "manifest not found" in capsys.readouterr().err


def test_invalid_manifest_exits_1(tmp_path, capsys):
    bad = tmp_path / "raw.csv"
    bad.write_text("id,label,income\na,0,12\n")
    assert run("ingest", bad, "--out-dir", tmp_path / "o") == 1
    assert capsys.readouterr().err.startswith("error:")


def test_numeric_failure_exits_3(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", learning_rate=1e300)
    out = tmp_path / "o"
    assert run("generate", "-c", cfg, "--out-dir", out) == 0
    with np.errstate(all="ignore"):
        code = run("train", "-c", cfg, "--out-dir", out)
    assert code == 3
    assert "non-finite" in capsys.readouterr().err


# generate / ingest


def test_generate_is_seeded(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", synth={"samples_per_run": 1000, "shift_strength": 0})
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for d in (a, b):
        assert run("generate", "-c", cfg, "--seed", 7, "--out-dir", d) == 0
    assert run("generate", "-c", cfg, "--seed", 8, "--out-dir", c) == 0
    text = capsys.readouterr().out
    assert "shift_strength: 0" in text
    assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
    assert (a / "manifest.csv").read_bytes() != (c / "manifest.csv").read_bytes()
    assert len(pd.read_csv(a / "manifest.csv")) == 1000


def test_ingest_enriches(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text(RAW)
    out = tmp_path / "o"
    assert run("ingest", raw, "--enrich", "--out-dir", out) == 0
    m = ingest_manifest(out / "manifest.csv")
    assert m.incomes.tolist() == [29410.0, 400.0]
    assert [s.continent.value for s in m.samples] == ["Europe", "Africa"]
    assert run("ingest", raw, "--enrich", "--override-income", "--out-dir", out) == 0
    assert ingest_manifest(out / "manifest.csv").incomes.tolist() == [29410.0, 1930.0]


# train


def test_train_outputs(workspace, capsys):
    cfg, out = workspace
    assert run("train", "-c", cfg, "--out-dir", out) == 0
    assert "validation top-1 accuracy" in capsys.readouterr().out
    log = pd.read_csv(out / "train_log.csv")
    assert list(log.columns) == ["epoch", "steps", "mean_loss", "train_accuracy"]
    assert len(log) == 2
    steps = pd.read_csv(out / "step_losses.csv")
    assert len(steps) == log["steps"].iloc[-1]
    assert load_model(out / "model.ckpt").config == MlpConfig(4, 6, (16,), 0.3)


def test_train_focal_gamma_zero_matches_baseline(tmp_path):
    base = write_config(tmp_path / "b.json")
    focal = write_config(tmp_path / "f.json", method="focal", focal_gamma=0.0)
    out_b, out_f = tmp_path / "b", tmp_path / "f"
    assert run("generate", "-c", base, "--out-dir", out_b) == 0
    assert run("train", "-c", base, "--out-dir", out_b) == 0
    assert run("train", "-c", focal, "--set", f'manifest="{out_b / "manifest.csv"}"', "--out-dir", out_f) == 0
    a = load_model(out_b / "model.ckpt").parameter_vector()
    b = load_model(out_f / "model.ckpt").parameter_vector()
    assert np.max(np.abs(a - b)) <= 1e-9


def test_train_sampled_histogram_is_uniform(tmp_path):
    cfg = write_config(
        tmp_path / "s.json", method="sampled", sampling_threshold=50, sampling_bin_width=300,
        synth={**SMALL["synth"], "samples_per_run": 3000},
    )
    out = tmp_path / "o"
    assert run("generate", "-c", cfg, "--out-dir", out) == 0
    assert run("train", "-c", cfg, "--out-dir", out) == 0
    df = pd.read_csv(out / "resampled_manifest.csv")
    counts = np.floor(df["income"] / 300).astype(int).value_counts()
    assert set(counts.tolist()) == {50}
    full = ingest_manifest(out / "manifest.csv")
    _, val = holdout_split(full)
    assert not set(df["id"]) & set(val.ids)
    # bins present in the training split survive; empty ones stay empty
    train, _ = holdout_split(full)
    assert sorted(counts.index) == np.unique(np.floor(train.incomes / 300)).astype(int).tolist()


# adapt


def test_adapt_aligned_fixture(tmp_path, capsys):
    cfg = write_config(
        tmp_path / "a.json",
        synth={**SMALL["synth"], "samples_per_run": 3000, "shift_strength": 0, "num_classes": 10, "feature_dim": 16},
        adda={"latent_dim": 16, "hidden": 64, "adversarial_steps": 200, "source_epochs": 3, "finetune_epochs": 1},
    )
    out = tmp_path / "o"
    assert run("generate", "-c", cfg, "--out-dir", out) == 0
    assert run("adapt", "-c", cfg, "--out-dir", out) == 0
    printed = capsys.readouterr().out
    hist = pd.read_csv(out / "adversarial_history.csv")
    assert len(hist) == 200
    final = float(printed.split("final discriminator accuracy:")[1].split()[0])
    assert final == pytest.approx(hist["disc_acc"].iloc[-1], abs=1e-4)
    assert 0.35 <= hist["disc_acc"].iloc[-50:].mean() <= 0.65
    for name in ("source_encoder", "target_encoder", "classifier", "discriminator", "classifier_finetuned"):
        assert (out / f"{name}.ckpt").is_file()
    summary = json.loads((out / "transfer.json").read_text())
    assert summary["split_income"] == 600.0
    assert set(summary["transfer"]) == {"source_on_source", "adapted_no_finetune", "adapted_finetuned"}


def test_adapt_source_encoder_matches_pre_adaptation(workspace):
    from geofair.adaptation import AddaConfig, split_domains, train_source
    from geofair.training import TrainConfig

    cfg, out = workspace
    assert run("adapt", "-c", cfg, "--out-dir", out) == 0
    ec = load_config(cfg)
    split = split_domains(ingest_manifest(out / "manifest.csv"), 600)
    acfg = AddaConfig.default(4, 6, latent_dim=8, hidden=32, adversarial_steps=40, batch_size=64)
    src = train_source(split, acfg, TrainConfig(epochs=2, batch_size=64, learning_rate=ec.learning_rate))
    assert load_model(out / "source_encoder.ckpt").identical_to(src.encoder)


def test_adapt_empty_domain_exits_1(workspace, capsys):
    cfg, out = workspace
    assert run("adapt", "-c", cfg, "--set", "adda.split_income=50", "--out-dir", out) == 1
    assert "target domain empty" in capsys.readouterr().err


# report


def test_report_perfect_classifier(tmp_path, capsys):
    k = 5
    r = make_rng(0)
    from geofair.dataset import DatasetManifest, Sample

    labels = r.integers(0, k, 400)
    samples = tuple(Sample(f"p{i}", np.eye(k)[y], int(y), float(r.uniform(10, 4000))) for i, y in enumerate(labels))
    out = tmp_path / "o"
    out.mkdir()
    write_manifest(DatasetManifest(samples, k, k), out / "manifest.csv")
    save_model(MlpModel(MlpConfig(k, k, (), 0.0), (np.eye(k) * 10,), (np.zeros(k),)), out / "perfect.ckpt")
    cfg = write_config(tmp_path / "c.json", hidden_dims=[], dropout_prob=0.0, topk=1)
    assert run("report", "-c", cfg, "--out-dir", out, "--checkpoint", out / "perfect.ckpt") == 0
    assert "accuracy_range: 0.0\n" in capsys.readouterr().out


def test_report_revalidates_from_curve(workspace, capsys):
    cfg, out = workspace
    assert run("train", "-c", cfg, "--out-dir", out) == 0
    assert run("report", "-c", cfg, "--out-dir", out, "--checkpoint", out / "model.ckpt") == 0
    printed = capsys.readouterr().out
    data = json.loads((out / "report" / "report.json").read_text())
    curve = pd.read_csv(out / "report" / "curve.csv")
    acc = curve["accuracy"].tolist()
    smooth = [np.mean(acc[max(0, j - 9) : j + 1]) for j in range(len(acc))]
    assert np.allclose(smooth, curve["moving_avg"], rtol=0, atol=1e-15)
    half = len(smooth) // 2
    assert data["accuracy_range"] == pytest.approx(max(smooth) - min(smooth), abs=1e-15)
    assert data["low_high_gap"] == pytest.approx(np.mean(smooth[-half:]) - np.mean(smooth[:half]), abs=1e-12)
    assert f"accuracy_range: {data['accuracy_range']}" in printed
    assert f"low_high_gap: {data['low_high_gap']}" in printed
    hits = pd.read_csv(out / "report" / "hits.csv")
    _, val = holdout_split(ingest_manifest(out / "manifest.csv"))
    assert hits["id"].tolist() == val.ids


def test_report_on_adapted_chain(workspace):
    cfg, out = workspace
    assert run("adapt", "-c", cfg, "--out-dir", out) == 0
    assert run(
        "report", "-c", cfg, "--out-dir", out, "--report-dir", out / "rep",
        "--checkpoint", out / "target_encoder.ckpt", "--checkpoint", out / "classifier_finetuned.ckpt",
    ) == 0
    assert (out / "rep" / "report.json").is_file()


def test_report_missing_checkpoint(workspace, capsys):
    cfg, out = workspace
    missing = out / "absent.ckpt"
    assert run("report", "-c", cfg, "--out-dir", out, "--checkpoint", missing) != 0
    assert str(missing) in capsys.readouterr().err


def test_report_architecture_mismatch(workspace, capsys):
    cfg, out = workspace
    save_model(init_mlp(MlpConfig(4, 6, (9,), 0.3), make_rng(0)), out / "other.ckpt")
    assert run("report", "-c", cfg, "--out-dir", out, "--checkpoint", out / "other.ckpt") == 1
    assert "hidden" in capsys.readouterr().err.lower()
    save_model(init_mlp(MlpConfig(4, 7, (3,), 0.0), make_rng(0)), out / "enc.ckpt")
    save_model(init_mlp(MlpConfig(8, 6, (3,), 0.0), make_rng(0)), out / "clf.ckpt")
    code = run("report", "-c", cfg, "--out-dir", out, "--checkpoint", out / "enc.ckpt", "--checkpoint", out / "clf.ckpt")
    assert code == 1
    assert "expects 8" in capsys.readouterr().err


def test_checkpoint_save_load_save_bytes(workspace):
    cfg, out = workspace
    assert run("train", "-c", cfg, "--out-dir", out) == 0
    first = (out / "model.ckpt").read_bytes()
    save_model(load_model(out / "model.ckpt"), out / "again.ckpt")
    assert (out / "again.ckpt").read_bytes() == first


def test_all_subcommands_rerun_byte_identical(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text(RAW)
    cfg = write_config(tmp_path / "c.json")
    runs = []
    for name in ("one", "two"):
        out = tmp_path / name
        assert run("generate", "-c", cfg, "--out-dir", out) == 0
        assert run("train", "-c", cfg, "--out-dir", out) == 0
        assert run("adapt", "-c", cfg, "--out-dir", out) == 0
        assert run("report", "-c", cfg, "--out-dir", out, "--checkpoint", out / "model.ckpt") == 0
        assert run("ingest", raw, "--enrich", "--set", 'manifest="ingested.csv"', "--out-dir", out) == 0
        runs.append(snapshot(out))
    assert runs[0].keys() == runs[1].keys()
    assert len(runs[0]) >= 15
    for key in runs[0]:
        assert runs[0][key] == runs[1][key], key
