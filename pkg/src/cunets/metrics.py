"""Segmentation metrics: Dice, Jaccard/IoU, pixel accuracy, Hausdorff,
and the thresholded case-count report.

Empty-mask conventions, fixed and documented:

* both masks empty: Dice and IoU are 1.0 (perfect agreement on nothing),
  Hausdorff is 0.0;
* exactly one mask empty: Dice and IoU are 0.0, Hausdorff is +inf;
* pixel accuracy never needs a convention.

Hausdorff runs over all foreground pixels (not just contours); the
maximum over the directed distances is the same either way and the full
point set keeps the brute-force oracle trivial.  Distances are reported
in pixels at mask resolution; pass a divisor (``--hausdorff-scale`` on
the CLI) to rescale when some other unit is wanted.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, InputError

METRIC_NAMES = ("dice", "iou", "accuracy", "hausdorff")

#: thresholded-case rules applied when none are given:
#: Dice >= 0.45 and 0.65, IoU >= 0.35 and 0.55, Hausdorff <= 2.75
DEFAULT_THRESHOLD_RULES = (
    ("dice", ">=", 0.45),
    ("dice", ">=", 0.65),
    ("iou", ">=", 0.35),
    ("iou", ">=", 0.55),
    ("hausdorff", "<=", 2.75),
)


def _as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise InputError(f"mask must be 2-D, got shape {m.shape}")
    return m.astype(bool)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise InputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def binarize(pred: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Probability map to {0,1} mask; pixels >= threshold become 1."""
    return (np.asarray(pred) >= threshold).astype(np.uint8)


def dice(a, b) -> float:
    a, b = _check_pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def iou(a, b) -> float:
    a, b = _check_pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    union = na + nb - inter
    return inter / union


def pixel_accuracy(a, b) -> float:
    a, b = _check_pair(a, b)
    return float((a == b).mean())


def hausdorff(gt, pred) -> float:
    """Symmetric Hausdorff distance between foreground pixel sets, in pixels."""
    gt, pred = _check_pair(gt, pred)
    a_pts = np.argwhere(gt).astype(np.int64)
    b_pts = np.argwhere(pred).astype(np.int64)
    if len(a_pts) == 0 and len(b_pts) == 0:
        return 0.0
    if len(a_pts) == 0 or len(b_pts) == 0:
        return math.inf
    d_ab = kernels.hausdorff_directed_sq(a_pts, b_pts)
    d_ba = kernels.hausdorff_directed_sq(b_pts, a_pts)
    return math.sqrt(max(d_ab, d_ba))


@dataclass
class CaseScore:
    source_id: str
    dice: float
    iou: float
    accuracy: float
    hausdorff: float

    def get(self, metric: str) -> float:
        if metric not in METRIC_NAMES:
            raise ConfigurationError(f"unknown metric {metric!r}; known: {METRIC_NAMES}")
        return getattr(self, metric)


def score_case(source_id: str, gt, pred_mask) -> CaseScore:
    return CaseScore(
        source_id=source_id,
        dice=dice(gt, pred_mask),
        iou=iou(gt, pred_mask),
        accuracy=pixel_accuracy(gt, pred_mask),
        hausdorff=hausdorff(gt, pred_mask),
    )


@dataclass
class ThresholdRow:
    metric: str
    comparator: str
    threshold: float
    case_count: int
    average: Optional[float]

    def label(self) -> str:
        return f"{self.metric} {self.comparator} {self.threshold:g}"


@dataclass
class ThresholdReport:
    rows: list[ThresholdRow]
    total_cases: int


def threshold_report(
    scores: Sequence[CaseScore],
    rules: Iterable[tuple[str, str, float]] = DEFAULT_THRESHOLD_RULES,
) -> ThresholdReport:
    """Count qualifying cases per rule and average that metric over them.

    A rule is (metric, comparator, threshold) with comparator '>=' or '<='.
    An empty qualifying set reports count 0 and a null average.
    """
    scores = list(scores)
    if not scores:
        raise InputError("threshold_report needs at least one case score")
    rows = []
    for metric, comparator, thr in rules:
        if metric not in METRIC_NAMES:
            raise ConfigurationError(f"unknown metric {metric!r} in threshold rule")
        if comparator not in (">=", "<="):
            raise ConfigurationError(f"comparator must be '>=' or '<=', got {comparator!r}")
        values = [s.get(metric) for s in scores]
        if comparator == ">=":
            qualifying = [v for v in values if v >= thr]
        else:
            qualifying = [v for v in values if v <= thr]
        avg = float(np.mean(qualifying)) if qualifying else None
        rows.append(ThresholdRow(metric, comparator, float(thr), len(qualifying), avg))
    return ThresholdReport(rows=rows, total_cases=len(scores))


@dataclass
class MetricReport:
    """Per-case scores plus aggregates and the thresholded case counts."""

    cases: list[CaseScore]
    report: ThresholdReport
    means: dict = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return self.means["dice"]

    @property
    def mean_iou(self) -> float:
        return self.means["iou"]


def build_report(
    scores: Sequence[CaseScore],
    rules: Iterable[tuple[str, str, float]] = DEFAULT_THRESHOLD_RULES,
) -> MetricReport:
    scores = list(scores)
    finite_h = [s.hausdorff for s in scores if math.isfinite(s.hausdorff)]
    means = {
        "dice": float(np.mean([s.dice for s in scores])),
        "iou": float(np.mean([s.iou for s in scores])),
        "accuracy": float(np.mean([s.accuracy for s in scores])),
        "hausdorff_finite": float(np.mean(finite_h)) if finite_h else None,
        "hausdorff_infinite_cases": len(scores) - len(finite_h),
    }
    return MetricReport(cases=scores, report=threshold_report(scores, rules), means=means)


def write_scores_csv(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_id", "dice", "iou", "accuracy", "hausdorff"])
        for s in report.cases:
            writer.writerow([s.source_id, f"{s.dice:.6f}", f"{s.iou:.6f}",
                             f"{s.accuracy:.6f}", f"{s.hausdorff:.6f}"])


def write_summary_json(report: MetricReport, path) -> None:
    payload = {
        "n_cases": len(report.cases),
        "means": report.means,
        "threshold_report": [
            {
                "metric": r.metric,
                "comparator": r.comparator,
                "threshold": r.threshold,
                "case_count": r.case_count,
                "average": r.average,
            }
            for r in report.report.rows
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def parse_threshold_rules(spec: str) -> list[tuple[str, str, float]]:
    """Parse 'dice>=0.45,iou>=0.35,hausdorff<=2.75' into rule triples."""
    rules = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        for comparator in (">=", "<="):
            if comparator in part:
                metric, _, value = part.partition(comparator)
                rules.append((metric.strip(), comparator, float(value)))
                break
        else:
            raise ConfigurationError(f"cannot parse threshold rule {part!r} (need >= or <=)")
    if not rules:
        raise ConfigurationError(f"no threshold rules found in {spec!r}")
    return rules
