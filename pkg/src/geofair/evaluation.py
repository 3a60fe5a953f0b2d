"""Top-k accuracy binned by income and continent, and the fairness report.

The smoothed curve averages each income bucket with up to ``window - 1``
preceding non-empty buckets; empty buckets are skipped rather than treated
as zero accuracy.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DatasetManifest, Sample, income_bin
from .errors import ValidationError
from .geo import DEFAULT_INCOME_TABLE
from .nn import MlpModel, predict_logits

UNKNOWN_CONTINENT = "unknown"


def topk_hits(logits: np.ndarray, labels, k: int) -> np.ndarray:
    """1 where the true class ranks among the ``k`` highest logits.

    Ties rank the lower class index first, so a class is outranked by every
    strictly larger logit and by equal logits with smaller indices.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[1]
    if not 1 <= k < num_classes:
        raise ValidationError(f"k must satisfy 1 <= k < {num_classes}, got {k}")
    rows = np.arange(len(labels))
    true = logits[rows, labels][:, None]
    idx = np.arange(num_classes)[None, :]
    ahead = (logits > true) | ((logits == true) & (idx < labels[:, None]))
    return (ahead.sum(axis=1) < k).astype(np.int8)


@dataclass(frozen=True)
class BinRecord:
    bin_lower: float
    bin_upper: float
    count: int
    accuracy: float


def binned_accuracy(incomes, hits, bin_width: float = 300.0) -> list[BinRecord]:
    """Accuracy per non-empty income bucket, ascending."""
    incomes = np.asarray(incomes, dtype=np.float64)
    hits = np.asarray(hits)
    if incomes.shape != hits.shape:
        raise ValidationError("hits must align with samples")
    if len(incomes) == 0:
        return []
    bins = income_bin(incomes, bin_width)
    out = []
    for b in np.unique(bins):
        m = bins == b
        n = int(m.sum())
        out.append(BinRecord(float(b * bin_width), float((b + 1) * bin_width), n, float(hits[m].sum()) / n))
    return out


def moving_average_curve(records: Sequence[BinRecord], window: int = 10) -> list[tuple[float, float]]:
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")
    acc = [r.accuracy for r in records]
    curve = []
    for j, r in enumerate(records):
        part = acc[max(0, j - window + 1) : j + 1]
        curve.append((r.bin_lower, sum(part) / len(part)))
    return curve


def continent_accuracy(samples: Sequence[Sample], hits) -> dict[str, tuple[int, float]]:
    """Per-continent ``(count, accuracy)``, richest continent first.

    Samples without a continent are reported under ``"unknown"`` (last).
    """
    hits = np.asarray(hits)
    tally: dict[str, list[int]] = {}
    for s, h in zip(samples, hits):
        key = s.continent.value if s.continent is not None else UNKNOWN_CONTINENT
        t = tally.setdefault(key, [0, 0])
        t[0] += 1
        t[1] += int(h)
    order = [c.value for c in DEFAULT_INCOME_TABLE.ordered()] + [UNKNOWN_CONTINENT]
    return {c: (tally[c][0], tally[c][1] / tally[c][0]) for c in order if c in tally}


@dataclass(frozen=True)
class FairnessReport:
    overall_topk: float
    k: int
    bin_width: float
    window: int
    num_samples: int
    per_bin: tuple[BinRecord, ...]
    moving_avg_curve: tuple[tuple[float, float], ...]
    per_continent: dict
    accuracy_range: float
    low_high_gap: float

    def to_dict(self) -> dict:
        return {
            "overall_topk": self.overall_topk,
            "k": self.k,
            "bin_width": self.bin_width,
            "window": self.window,
            "num_samples": self.num_samples,
            "accuracy_range": self.accuracy_range,
            "low_high_gap": self.low_high_gap,
            "per_bin": [
                {"bin_lower": r.bin_lower, "bin_upper": r.bin_upper, "n": r.count, "accuracy": r.accuracy}
                for r in self.per_bin
            ],
            "moving_avg_curve": [{"bin_lower": b, "moving_avg": v} for b, v in self.moving_avg_curve],
            "per_continent": {c: {"n": n, "accuracy": a} for c, (n, a) in self.per_continent.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lower", "bin_upper", "n", "accuracy", "moving_avg"])
        for r, (_, smooth) in zip(self.per_bin, self.moving_avg_curve):
            w.writerow([repr(r.bin_lower), repr(r.bin_upper), r.count, repr(r.accuracy), repr(smooth)])
        return buf.getvalue()


def disparity(curve: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """``(max - min, mean(top half) - mean(bottom half))`` of the smoothed curve.

    With an odd number of buckets the middle one belongs to neither half.
    """
    vals = [v for _, v in curve]
    if not vals:
        return 0.0, 0.0
    spread = max(vals) - min(vals)
    half = len(vals) // 2
    if half == 0:
        return spread, 0.0
    gap = sum(vals[-half:]) / half - sum(vals[:half]) / half
    return spread, gap


def report_from_hits(
    samples: Sequence[Sample], incomes, hits, k: int, bin_width: float = 300.0, window: int = 10
) -> FairnessReport:
    hits = np.asarray(hits)
    per_bin = binned_accuracy(incomes, hits, bin_width)
    curve = moving_average_curve(per_bin, window)
    spread, gap = disparity(curve)
    return FairnessReport(
        overall_topk=float(hits.mean()) if len(hits) else 0.0,
        k=k,
        bin_width=float(bin_width),
        window=window,
        num_samples=len(hits),
        per_bin=tuple(per_bin),
        moving_avg_curve=tuple(curve),
        per_continent=continent_accuracy(samples, hits),
        accuracy_range=spread,
        low_high_gap=gap,
    )


def build_report(
    models: MlpModel | Sequence[MlpModel],
    manifest: DatasetManifest,
    k: int = 5,
    bin_width: float = 300.0,
    window: int = 10,
    workers: int = 1,
) -> tuple[FairnessReport, np.ndarray]:
    """Evaluate ``models`` (a classifier, or encoder then classifier) on ``manifest``.

    Returns the report and the per-sample hit vector it was computed from.
    """
    if len(manifest) == 0:
        raise ValidationError("cannot report on an empty manifest")
    logits = predict_logits(models, manifest.features, workers=workers)
    hits = topk_hits(logits, manifest.labels, k)
    return report_from_hits(manifest.samples, manifest.incomes, hits, k, bin_width, window), hits


def hits_csv(manifest: DatasetManifest, hits) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "income", "continent", "label", "hit"])
    for s, h in zip(manifest.samples, hits):
        w.writerow([s.id, repr(float(s.income)), s.continent.value if s.continent else "", s.label, int(h)])
    return buf.getvalue()


def curve_svg(report: FairnessReport, width: int = 640, height: int = 360, title: str = "") -> str:
    """Line chart of the smoothed accuracy against income."""
    pad = 50
    pts = report.moving_avg_curve
    xs = [b + report.bin_width / 2 for b, _ in pts]
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + report.bin_width

    def sx(x):
        return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(y):
        return height - pad - y * (height - 2 * pad)

    poly = " ".join(f"{sx(x):.2f},{sy(v):.2f}" for x, (_, v) in zip(xs, pts))
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        lines.append(
            f'<text x="{pad - 6}" y="{sy(t) + 4:.2f}" font-size="10" text-anchor="end">{t:.2f}</text>'
        )
    lines.append(
        f'<text x="{pad}" y="{height - pad + 16}" font-size="10">{x_lo:g}</text>'
        f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="end">{x_hi:g}</text>'
    )
    lines.append(
        f'<text x="{width / 2:.0f}" y="{height - 10}" font-size="12" text-anchor="middle">income (US$)</text>'
    )
    lines.append(
        f'<text x="14" y="{height / 2:.0f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {height / 2:.0f})">top-{report.k} accuracy</text>'
    )
    if title:
        lines.append(f'<text x="{width / 2:.0f}" y="20" font-size="13" text-anchor="middle">{title}</text>')
    if poly:
        lines.append(f'<polyline points="{poly}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_report(
    report: FairnessReport, manifest: DatasetManifest, hits, out_dir: str | Path, svg: bool = True
) -> dict[str, Path]:
    """Write ``report.json``, ``curve.csv``, ``hits.csv`` and optionally ``curve.svg``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.json",
        "curve": out / "curve.csv",
        "hits": out / "hits.csv",
    }
    paths["report"].write_text(report.to_json(), encoding="utf-8")
    paths["curve"].write_text(report.curve_csv(), encoding="utf-8")
    paths["hits"].write_text(hits_csv(manifest, hits), encoding="utf-8")
    if svg:
        paths["svg"] = out / "curve.svg"
        paths["svg"].write_text(curve_svg(report), encoding="utf-8")
    return paths
