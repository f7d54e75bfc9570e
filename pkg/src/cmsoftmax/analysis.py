"""Feature-norm quality analysis, FROC/CPM detection metrics and 2-D scatter plots."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, FormatError

CPM_FPS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


@dataclass(frozen=True)
class SampleRecord:
    index: int
    feature: np.ndarray
    norm: float
    label: int
    prediction: int
    correct: bool
    prob: float


def make_records(features, labels, predictions, probs, indices=None) -> list[SampleRecord]:
    features = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=1)
    if indices is None:
        indices = range(len(features))
    return [
        SampleRecord(int(i), f.copy(), float(n), int(y), int(p), bool(y == p), float(pr))
        for i, f, n, y, p, pr in zip(indices, features, norms, labels, predictions, probs)
    ]


# --------------------------------------------------------------------------
# quality partition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QualityPartition:
    low: list[SampleRecord]
    good: list[SampleRecord]
    fraction: float


def partition_by_norm(records: Sequence[SampleRecord], fraction: float = 0.2) -> QualityPartition:
    """Bottom ``floor(fraction * n)`` records by (norm, index) form the low subset."""
    if not records:
        raise DomainError("cannot partition an empty record list")
    if not 0.0 < fraction < 1.0:
        raise DomainError(f"fraction must lie in (0, 1), got {fraction}")
    ranked = sorted(records, key=lambda r: (r.norm, r.index))
    k = math.floor(fraction * len(ranked))
    return QualityPartition(ranked[:k], ranked[k:], fraction)


@dataclass(frozen=True)
class ReportRow:
    subset: str
    count: int
    accuracy: float
    mean_norm: float


def _row(name: str, rows: Sequence[SampleRecord]) -> ReportRow:
    if not rows:
        return ReportRow(name, 0, math.nan, math.nan)
    acc = sum(r.correct for r in rows) / len(rows)
    return ReportRow(name, len(rows), acc, float(np.mean([r.norm for r in rows])))


def subset_report(partition: QualityPartition) -> list[ReportRow]:
    """Rows good, low, overall; an empty subset reports NaN accuracy and norm."""
    return [
        _row("good", partition.good),
        _row("low", partition.low),
        _row("overall", list(partition.good) + list(partition.low)),
    ]


# --------------------------------------------------------------------------
# FROC / CPM
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    scan_id: int | str
    score: float
    is_true_nodule: bool


@dataclass(frozen=True)
class FrocInput:
    candidates: Sequence[Candidate]
    n_scans: int
    n_ground_truth_nodules: int

    def __post_init__(self):
        if self.n_ground_truth_nodules < 1:
            raise DomainError("need at least one ground-truth nodule")
        if self.n_scans < 1:
            raise DomainError("need at least one scan")
        if not all(math.isfinite(c.score) for c in self.candidates):
            raise DomainError("candidate scores must be finite")


@dataclass(frozen=True)
class FrocPoint:
    threshold: float
    fps_per_scan: float
    sensitivity: float


def froc(data: FrocInput) -> list[FrocPoint]:
    """One point per distinct score, thresholds descending (candidates with score >= t count)."""
    if not data.candidates:
        return []
    scores = np.array([c.score for c in data.candidates], dtype=np.float64)
    truth = np.array([c.is_true_nodule for c in data.candidates], dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, truth = scores[order], truth[order]
    tp = np.cumsum(truth)
    fp = np.cumsum(~truth)
    # last position of each run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    return [
        FrocPoint(float(scores[i]), fp[i] / data.n_scans, tp[i] / data.n_ground_truth_nodules)
        for i in ends
    ]


def sensitivity_at(curve: Sequence[FrocPoint], fps: float) -> float:
    """Linear interpolation in FPs/scan; 0 left of the curve, last value right of it."""
    xs = [p.fps_per_scan for p in curve]
    if fps < xs[0]:
        return 0.0
    k = int(np.searchsorted(xs, fps, side="right")) - 1
    if k == len(curve) - 1:
        return curve[k].sensitivity
    a, b = curve[k], curve[k + 1]
    t = (fps - a.fps_per_scan) / (b.fps_per_scan - a.fps_per_scan)
    return a.sensitivity + t * (b.sensitivity - a.sensitivity)


def cpm(curve: Sequence[FrocPoint], operating_points: Sequence[float] = CPM_FPS) -> float:
    """Mean sensitivity at 1/8, 1/4, 1/2, 1, 2, 4 and 8 FPs per scan."""
    if not curve:
        raise DomainError("cpm needs a non-empty FROC curve")
    return float(np.mean([sensitivity_at(curve, q) for q in operating_points]))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def write_records_csv(records: Iterable[SampleRecord], path) -> None:
    records = list(records)
    d = len(records[0].feature) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "pred", "correct", "prob", "norm"] + [f"f{j}" for j in range(d)])
        for r in records:
            w.writerow(
                [r.index, r.label, r.prediction, int(r.correct), repr(r.prob), repr(r.norm)]
                + [repr(float(v)) for v in r.feature]
            )


def read_records_csv(path) -> list[SampleRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:6] != ["index", "label", "pred", "correct", "prob", "norm"]:
        raise FormatError(f"{path}: not a records CSV")
    out = []
    for r in rows[1:]:
        feature = np.array([float(v) for v in r[6:]])
        out.append(
            SampleRecord(int(r[0]), feature, float(r[5]), int(r[1]), int(r[2]), r[3] == "1", float(r[4]))
        )
    return out


def write_report_csv(rows: Iterable[ReportRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subset", "count", "accuracy", "mean_norm"])
        for row in rows:
            w.writerow([row.subset, row.count, repr(row.accuracy), repr(row.mean_norm)])


# --------------------------------------------------------------------------
# SVG scatter
# --------------------------------------------------------------------------


def _axis_range(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        return -1.0, 1.0
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    if span == 0:
        span = max(abs(lo), 1.0)
        lo, hi = lo - span / 2, hi + span / 2
    return lo - 0.05 * span, hi + 0.05 * span


def scatter_svg(records: Sequence[SampleRecord], path, size: int = 600, radius: float = 1.5) -> None:
    """Write one circle per record, coloured by class."""
    for r in records:
        if len(r.feature) != 2:
            raise DimensionError(f"scatter_svg needs 2-D features, record {r.index} has {len(r.feature)}")
    size = max(int(size), 100)
    pts = np.array([r.feature for r in records], dtype=np.float64).reshape(-1, 2)
    x0, x1 = _axis_range(pts[:, 0])
    y0, y1 = _axis_range(pts[:, 1])
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="black"/>',
    ]
    if x0 < 0 < x1:
        px = (0 - x0) / (x1 - x0) * size
        lines.append(f'<line x1="{px:.3f}" y1="0" x2="{px:.3f}" y2="{size}" stroke="#cccccc"/>')
    if y0 < 0 < y1:
        py = (1 - (0 - y0) / (y1 - y0)) * size
        lines.append(f'<line x1="0" y1="{py:.3f}" x2="{size}" y2="{py:.3f}" stroke="#cccccc"/>')
    for r, (x, y) in zip(records, pts):
        cx = (x - x0) / (x1 - x0) * size
        cy = (1 - (y - y0) / (y1 - y0)) * size
        lines.append(
            f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="{radius}" fill="{PALETTE[r.label % 10]}"/>'
        )
    lines.append("</svg>")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
