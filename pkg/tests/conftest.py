import os

import pytest
from hypothesis import HealthCheck, settings

from geofair.dataset import DatasetManifest, Sample
from geofair.nn import MlpConfig, init_mlp, make_rng

settings.register_profile(
    "geofair", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "geofair"))

# Lines printed at the end of the run by the acceptance module.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_model(rng):
    return init_mlp(MlpConfig(4, 3, (6, 5), 0.0), rng)


def make_manifest(incomes, num_classes=3, dim=2, seed=0, prefix="x"):
    r = make_rng(seed)
    samples = tuple(
        Sample(f"{prefix}{i:05d}", r.standard_normal(dim), int(r.integers(num_classes)), float(inc))
        for i, inc in enumerate(incomes)
    )
    return DatasetManifest(samples, num_classes, dim)
