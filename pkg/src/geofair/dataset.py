"""Samples, manifests, income binning, resampling and synthetic data.

Manifest CSV layout (UTF-8, header required)::

    id,label,income,latitude,longitude,continent,f0,f1,...,f{D-1}

``latitude``, ``longitude`` and ``continent`` may be empty. Instead of
``f*`` columns a manifest may carry a single ``feature_ref`` column of the
form ``file.npy:row`` pointing into a 2-D ``.npy`` array stored next to the
manifest.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .geo import (
    DEFAULT_INCOME_TABLE,
    Continent,
    ContinentIncomeTable,
    GeoTable,
    check_coordinates,
    resolve_continent,
)
from .nn import Rng, make_rng

BASE_COLUMNS = ["id", "label", "income", "latitude", "longitude", "continent"]


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    features: np.ndarray
    label: int
    income: float | None
    latitude: float | None = None
    longitude: float | None = None
    continent: Continent | None = None

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64).reshape(-1)
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.income is not None and not (
            isinstance(self.income, (int, float)) and self.income > 0 and math.isfinite(self.income)
        ):
            raise ValidationError(f"sample {self.id}: income must be a positive number, got {self.income}")
        if int(self.label) != self.label or self.label < 0:
            raise ValidationError(f"sample {self.id}: label must be a non-negative integer")
        if (self.latitude is None) != (self.longitude is None):
            raise ValidationError(f"sample {self.id}: latitude and longitude must be given together")
        if self.latitude is not None:
            check_coordinates(self.latitude, self.longitude)


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    samples: tuple[Sample, ...]
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.num_classes < 1 or self.feature_dim < 1:
            raise ValidationError("num_classes and feature_dim must be positive")
        for s in self.samples:
            if s.income is None:
                raise ValidationError(f"sample {s.id}: income is required in a manifest")
            if s.features.shape != (self.feature_dim,):
                raise ValidationError(
                    f"sample {s.id}: {s.features.size} features, manifest expects {self.feature_dim}"
                )
            if s.label >= self.num_classes:
                raise ValidationError(f"sample {s.id}: label {s.label} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def features(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.feature_dim))
        return np.stack([s.features for s in self.samples])

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @cached_property
    def incomes(self) -> np.ndarray:
        return np.array([s.income for s in self.samples], dtype=np.float64)

    @cached_property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return DatasetManifest(tuple(self.samples[i] for i in indices), self.num_classes, self.feature_dim)


# -- CSV -----------------------------------------------------------------------

def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def manifest_to_csv(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BASE_COLUMNS + [f"f{j}" for j in range(manifest.feature_dim)])
    for s in manifest.samples:
        w.writerow(
            [s.id, s.label, _fmt(s.income), _fmt(s.latitude), _fmt(s.longitude),
             s.continent.value if s.continent else ""]
            + [repr(float(v)) for v in s.features]
        )
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(manifest_to_csv(manifest), encoding="utf-8", newline="")


def _parse_float(text: str, lineno: int, col: int, name: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"line {lineno}, column {col} ({name}): not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ValidationError(f"line {lineno}, column {col} ({name}): non-finite value")
    return v


def ingest_manifest(
    path: str | Path,
    num_classes: int | None = None,
    enrich: bool = False,
    override_income: bool = False,
    income_table: ContinentIncomeTable = DEFAULT_INCOME_TABLE,
    geo_table: GeoTable | None = None,
) -> DatasetManifest:
    """Read and validate a manifest CSV.

    With ``enrich`` set, rows that have coordinates but no continent get one
    from :func:`resolve_continent`, and rows with an empty income take the
    continent's GDP per capita (``override_income`` replaces every income).
    ``num_classes`` defaults to ``max(label) + 1``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file, header required")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in BASE_COLUMNS if c not in header]
    if missing:
        raise ValidationError(f"{path}: header lacks columns {missing}")
    col = {name: i for i, name in enumerate(header)}
    fcols = [c for c in header if c.startswith("f") and c[1:].isdigit()]
    fcols.sort(key=lambda c: int(c[1:]))
    if fcols and [int(c[1:]) for c in fcols] != list(range(len(fcols))):
        raise ValidationError(f"{path}: feature columns must be f0..f{{D-1}} without gaps")
    use_ref = not fcols
    if use_ref and "feature_ref" not in col:
        raise ValidationError(f"{path}: no feature columns (f0.. or feature_ref)")
    sidecars: dict[str, np.ndarray] = {}

    samples = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ValidationError(f"line {lineno}: {len(row)} fields, header has {len(header)}")

        def cell(name):
            return row[col[name]].strip()

        sid = cell("id")
        if not sid:
            raise ValidationError(f"line {lineno}, column {col['id'] + 1} (id): missing required field")
        label_txt = cell("label")
        if not label_txt.lstrip("-").isdigit():
            raise ValidationError(f"line {lineno}, column {col['label'] + 1} (label): not an integer: {label_txt!r}")
        label = int(label_txt)
        if label < 0:
            raise ValidationError(f"line {lineno}, column {col['label'] + 1} (label): negative label")

        lat = lon = None
        if cell("latitude") or cell("longitude"):
            lat = _parse_float(cell("latitude"), lineno, col["latitude"] + 1, "latitude")
            lon = _parse_float(cell("longitude"), lineno, col["longitude"] + 1, "longitude")
            try:
                check_coordinates(lat, lon)
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
        continent = None
        if cell("continent"):
            try:
                continent = Continent.parse(cell("continent"))
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}, column {col['continent'] + 1}: {exc}") from None
        if enrich and continent is None and lat is not None:
            continent = resolve_continent(lat, lon, geo_table)

        income_txt = cell("income")
        if enrich and continent is not None and (override_income or not income_txt):
            income = float(income_table[continent])
        elif not income_txt:
            raise ValidationError(f"line {lineno}, column {col['income'] + 1} (income): missing required field")
        else:
            income = _parse_float(income_txt, lineno, col["income"] + 1, "income")
            if income <= 0:
                raise ValidationError(
                    f"line {lineno}, column {col['income'] + 1} (income): must be positive, got {income_txt}"
                )

        if use_ref:
            feats = _load_ref(path, cell("feature_ref"), lineno, sidecars)
        else:
            feats = np.array(
                [_parse_float(row[col[c]].strip(), lineno, col[c] + 1, c) for c in fcols]
            )
        samples.append(Sample(sid, feats, label, income, lat, lon, continent))

    if not samples:
        raise ValidationError(f"{path}: no samples")
    k = num_classes if num_classes is not None else max(s.label for s in samples) + 1
    return DatasetManifest(tuple(samples), k, samples[0].features.size)


def _load_ref(manifest_path: Path, ref: str, lineno: int, cache: dict) -> np.ndarray:
    fname, _, idx = ref.rpartition(":")
    if not fname or not idx.isdigit():
        raise ValidationError(f"line {lineno}: feature_ref must look like 'file.npy:row', got {ref!r}")
    if fname not in cache:
        sidecar = manifest_path.parent / fname
        if not sidecar.is_file():
            raise ValidationError(f"line {lineno}: feature file {sidecar} not found")
        cache[fname] = np.load(sidecar, allow_pickle=False)
    arr = cache[fname]
    if int(idx) >= len(arr):
        raise ValidationError(f"line {lineno}: row {idx} beyond {len(arr)} rows of {fname}")
    return arr[int(idx)]


# -- geography -------------------------------------------------------------------

def assign_income_from_continent(
    sample: Sample, table: ContinentIncomeTable = DEFAULT_INCOME_TABLE, override: bool = False
) -> Sample:
    """Return ``sample`` with its income set to the continent's GDP per capita.

    An existing income is only replaced when ``override`` is set.
    """
    if sample.continent is None:
        raise ValidationError(f"sample {sample.id}: no continent to derive income from")
    if sample.income is not None and not override:
        return sample
    return dataclasses.replace(sample, income=float(table[sample.continent]))


def enrich_sample(sample: Sample, geo_table: GeoTable | None = None) -> Sample:
    """Fill in a missing continent from coordinates."""
    if sample.continent is not None or sample.latitude is None:
        return sample
    return dataclasses.replace(
        sample, continent=resolve_continent(sample.latitude, sample.longitude, geo_table)
    )


# -- income bins -------------------------------------------------------------------

@dataclass(frozen=True)
class IncomeBinning:
    bin_width: float
    assignment: np.ndarray
    bins: dict[int, np.ndarray] = field(repr=False)

    def counts(self) -> dict[int, int]:
        return {b: len(ix) for b, ix in self.bins.items()}


def income_bin(income, bin_width: float):
    return np.floor(np.asarray(income, dtype=np.float64) / bin_width).astype(np.int64)


def bin_by_income(manifest: DatasetManifest, bin_width: float = 300.0) -> IncomeBinning:
    """Assign each sample to bin ``floor(income / bin_width)``.

    ``bins`` maps each non-empty bin (ascending) to its sample indices in
    manifest order.
    """
    if not bin_width > 0:
        raise ValidationError(f"bin_width must be positive, got {bin_width}")
    assign = income_bin(manifest.incomes, bin_width)
    bins = {int(b): np.flatnonzero(assign == b) for b in np.unique(assign)}
    return IncomeBinning(float(bin_width), assign, bins)


def resample_to_threshold(
    manifest: DatasetManifest, binning: IncomeBinning, threshold: int = 5000, rng: Rng | None = None
) -> DatasetManifest:
    """Draw exactly ``threshold`` samples from every non-empty income bin.

    Bins larger than the threshold are undersampled without replacement,
    smaller ones oversampled uniformly with replacement, and bins of exactly
    ``threshold`` are shuffled. Output is bin-major in ascending bin order.
    """
    if len(manifest) == 0:
        raise ValidationError("cannot resample an empty manifest")
    if int(threshold) != threshold or threshold < 1:
        raise ValidationError(f"threshold must be a positive integer, got {threshold}")
    if rng is None:
        rng = make_rng(0)
    chosen = []
    for b in sorted(binning.bins):
        idx = binning.bins[b]
        if len(idx) >= threshold:
            chosen.append(rng.choice(idx, size=threshold, replace=False))
        else:
            chosen.append(rng.choice(idx, size=threshold, replace=True))
    return manifest.subset(np.concatenate(chosen).tolist())


# -- train / validation holdout -----------------------------------------------------

def id_bucket(sample_id: str, buckets: int = 100) -> int:
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % buckets


def holdout_split(
    manifest: DatasetManifest, validation_percent: int = 20
) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic train/validation split keyed on a hash of the sample id."""
    val = [i for i, s in enumerate(manifest.samples) if id_bucket(s.id) < validation_percent]
    val_set = set(val)
    train = [i for i in range(len(manifest)) if i not in val_set]
    return manifest.subset(train), manifest.subset(val)


# -- synthetic benchmark --------------------------------------------------------

ROTATION_PER_SHIFT = 0.25  # radians of rotation per unit of shift_strength


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 10
    feature_dim: int = 16
    samples_per_run: int = 10_000
    income_range: tuple[float, float] = (25.0, 10_000.0)
    shift_strength: float = 2.0
    imbalance_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "income_range", tuple(float(v) for v in self.income_range))
        lo, hi = self.income_range
        if not 0 < lo < hi:
            raise ValidationError(f"income_range must satisfy 0 < min < max, got {self.income_range}")
        for name in ("num_classes", "feature_dim", "samples_per_run"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.feature_dim < 2:
            raise ValidationError("feature_dim must be at least 2 for the rotation plane")
        if self.shift_strength < 0 or self.imbalance_exponent < 0:
            raise ValidationError("shift_strength and imbalance_exponent must be non-negative")


def class_means(num_classes: int, feature_dim: int, rng: Rng, radius: float = 3.0) -> np.ndarray:
    v = rng.standard_normal((num_classes, feature_dim))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(config: SynthConfig) -> DatasetManifest:
    """Seeded classification data whose difficulty grows as income falls.

    Class means lie on a sphere of radius 3 and each sample adds unit
    Gaussian noise. Incomes are log-uniform on ``income_range``. Every
    sample below the income median is then rotated in the plane of the
    first two feature axes by ``0.25 * shift_strength`` radians, translated
    by ``shift_strength`` along the normalised all-ones direction, and given
    extra noise with standard deviation
    ``shift_strength * (1 - income / median)``. Class frequencies follow
    ``(k + 1) ** -imbalance_exponent``.
    """
    rng = make_rng(config.seed)
    k, d, n = config.num_classes, config.feature_dim, config.samples_per_run
    means = class_means(k, d, rng)
    freq = (np.arange(k) + 1.0) ** -config.imbalance_exponent
    labels = rng.choice(k, size=n, p=freq / freq.sum())
    lo, hi = config.income_range
    incomes = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
    feats = means[labels] + rng.standard_normal((n, d))

    s = config.shift_strength
    median = float(np.median(incomes))
    low = incomes < median
    theta = ROTATION_PER_SHIFT * s
    c, si = np.cos(theta), np.sin(theta)
    x0, x1 = feats[low, 0].copy(), feats[low, 1].copy()
    feats[low, 0] = c * x0 - si * x1
    feats[low, 1] = si * x0 + c * x1
    feats[low] += s * np.ones(d) / np.sqrt(d)
    extra_sd = s * (1.0 - incomes[low] / median)
    feats[low] += rng.standard_normal((int(low.sum()), d)) * extra_sd[:, None]

    samples = tuple(
        Sample(f"s{i:06d}", feats[i], int(labels[i]), float(incomes[i])) for i in range(n)
    )
    return DatasetManifest(samples, k, d)


def histogram_lines(manifest: DatasetManifest, bin_width: float) -> list[str]:
    """Human-readable per-bin and per-class counts."""
    binning = bin_by_income(manifest, bin_width)
    lines = ["income bins:"]
    for b, n in binning.counts().items():
        lines.append(f"  [{b * bin_width:g}, {(b + 1) * bin_width:g}): {n}")
    lines.append("classes:")
    counts = np.bincount(manifest.labels, minlength=manifest.num_classes)
    for k, n in enumerate(counts):
        lines.append(f"  {k}: {n}")
    return lines


def concat(manifests: Sequence[DatasetManifest]) -> DatasetManifest:
    first = manifests[0]
    return DatasetManifest(
        tuple(s for m in manifests for s in m.samples), first.num_classes, first.feature_dim
    )
