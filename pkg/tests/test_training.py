import numpy as np
import pytest

from geofair.errors import ConfigError, NumericError
from geofair.nn import MlpConfig, init_mlp, make_rng
from geofair.training import TrainConfig, accuracy, fit


@pytest.fixture(scope="module")
def blobs():
    r = make_rng(21)
    y = r.integers(0, 4, 600)
    centers = r.standard_normal((4, 5)) * 6
    x = centers[y] + r.standard_normal((600, 5))
    inc = r.uniform(50, 5000, 600)
    return x, y, inc


def train(blobs, seed=0, **kw):
    x, y, inc = blobs
    r = make_rng(seed)
    m = init_mlp(MlpConfig(5, 4, (16, 16), 0.3), r)
    return fit(m, x, y, TrainConfig(**kw), r, incomes=kw.pop("incomes", inc))


def test_training_learns(blobs):
    res = train(blobs, epochs=5, batch_size=32)
    x, y, _ = blobs
    assert accuracy(res.model, x, y) > 0.9
    assert res.epochs[-1].mean_loss < res.epochs[0].mean_loss
    assert [e.epoch for e in res.epochs] == list(range(5))
    assert res.epochs[-1].steps == len(res.step_losses) == 5 * 19


def test_focal_gamma_zero_reproduces_baseline(blobs):
    a = train(blobs, epochs=3, loss="nll")
    b = train(blobs, epochs=3, loss="focal", focal_gamma=0.0)
    assert np.max(np.abs(a.model.parameter_vector() - b.model.parameter_vector())) <= 1e-9
    assert a.step_losses == b.step_losses


def test_weighted_equal_incomes_tracks_summed_baseline(blobs):
    x, y, _ = blobs
    flat = (x, y, np.full(len(y), 250.0))
    base = train(flat, epochs=2, batch_size=60, loss="nll")
    weighted = train(flat, epochs=2, batch_size=60, loss="weighted")
    assert weighted.step_losses[0] == pytest.approx(base.step_losses[0] * 60, rel=1e-14)
    # Adam ignores a constant gradient scale (up to epsilon), so with equal
    # batch sizes the two trajectories coincide.
    assert np.allclose(weighted.step_losses, np.array(base.step_losses) * 60, rtol=1e-6)


def test_max_steps_caps_updates(blobs):
    res = train(blobs, epochs=10, batch_size=100, max_steps=7)
    assert len(res.step_losses) == 7
    res = train(blobs, epochs=3, max_steps=0)
    assert res.step_losses == [] and res.epochs == []


def test_zero_epochs_returns_initial_model(blobs):
    x, y, _ = blobs
    m = init_mlp(MlpConfig(5, 4, (8,), 0.0), make_rng(0))
    res = fit(m, x, y, TrainConfig(epochs=0), make_rng(0))
    assert res.model.identical_to(m)


def test_fit_is_deterministic(blobs):
    assert train(blobs, seed=5, epochs=2).model.identical_to(train(blobs, seed=5, epochs=2).model)
    assert not train(blobs, seed=5, epochs=1).model.identical_to(train(blobs, seed=6, epochs=1).model)


def test_config_errors(blobs):
    with pytest.raises(ConfigError):
        TrainConfig(loss="hinge")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    x, y, _ = blobs
    m = init_mlp(MlpConfig(5, 4, (8,), 0.0), make_rng(0))
    with pytest.raises(ConfigError, match="incomes"):
        fit(m, x, y, TrainConfig(loss="weighted"), make_rng(0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(blobs):
    x, y, _ = blobs
    bad = x.copy()
    bad[3, 0] = np.inf
    m = init_mlp(MlpConfig(5, 4, (8,), 0.0), make_rng(0))
    with pytest.raises(NumericError, match="step 0"):
        fit(m, bad, y, TrainConfig(batch_size=600), make_rng(0))


def test_chain_training_matches_shapes(blobs):
    x, y, _ = blobs
    r = make_rng(1)
    enc = init_mlp(MlpConfig(5, 6, (8,), 0.0), r)
    clf = init_mlp(MlpConfig(6, 4, (8,), 0.0), r)
    res = fit([enc, clf], x, y, TrainConfig(epochs=30, batch_size=32), r)
    assert len(res.models) == 2
    assert accuracy(res.models, x, y) > 0.85
