"""Per-class exit threshold selection against backbone precision.

The backbone's per-class precision is measured once on the calibration split.
For each branch and class, the calibration records (predicted class,
confidence, correctness) are swept over every candidate threshold; the chosen
threshold is the smallest candidate whose exited set is nonempty and at least
as precise as (1 + margin) times the backbone's precision for that class.
Smallest-first maximizes the exit count subject to the precision constraint.

A class can come out DISABLED (represented as None): no threshold satisfies
the requirement, the class has no calibration records, or the backbone never
predicts it. DISABLED behaves as an infinite threshold at inference. The
precision comparison uses >= rather than a strict inequality: sweep precisions
are step functions and a candidate landing exactly on the requirement is
accepted.

Correctness bits follow the pipeline-wide label mode (distillation calibrates
against backbone labels); backbone precision itself is always measured against
ground truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .branch_heads import BranchHeads, classify, confidence_scores
from .dataset_store import ValidationError
from .trainer import resolve_labels

log = logging.getLogger(__name__)

# A disabled threshold is serialized as null; in memory it is None.
DISABLED = None


@dataclass
class PrecisionTable:
    """Backbone per-class precision on the calibration split.

    ``precision[i]`` is None (undefined) when the backbone never predicts
    class i there; ``support[i]`` counts backbone predictions of class i.
    """

    precision: list
    support: list

    def __post_init__(self):
        if len(self.precision) != len(self.support):
            raise ValidationError("precision and support lengths differ")
        for p in self.precision:
            if p is not None and not 0.0 <= p <= 1.0:
                raise ValidationError(f"precision {p} outside [0, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.precision)


@dataclass(frozen=True)
class CalibrationRecord:
    """One calibration-split sample as one branch sees it."""

    predicted: int
    confidence: float
    correct: bool


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    precision: float | None  # None when nothing exits at this candidate
    exit_count: int


@dataclass
class ThresholdTable:
    """Per-branch, per-class thresholds plus the margin that produced them."""

    margin: float
    per_branch: dict = field(default_factory=dict)  # level -> list of float|None

    def thresholds_for(self, level: int) -> list:
        return self.per_branch[level]


def backbone_class_precision(split) -> PrecisionTable:
    """P[i] = |pred=i and label=i| / |pred=i| against ground truth."""
    labels = np.asarray(split.labels, dtype=np.int64)
    preds = np.asarray(split.backbone_pred, dtype=np.int64)
    n_classes = split.num_classes
    precision = []
    support = []
    for i in range(n_classes):
        mask = preds == i
        count = int(np.count_nonzero(mask))
        support.append(count)
        if count == 0:
            precision.append(None)
        else:
            precision.append(float(np.count_nonzero(labels[mask] == i) / count))
    return PrecisionTable(precision=precision, support=support)


def precision_sweep(records: list) -> list:
    """Candidate thresholds {0} + distinct confidences, ascending, each with
    the precision and size of its exited set {r : r.confidence > T}."""
    if not records:
        return []
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    correct = np.array([r.correct for r in records], dtype=np.float64)
    order = np.argsort(conf, kind="stable")
    conf = conf[order]
    correct = correct[order]
    # suffix sums: exits at candidate T are the strict tail conf > T
    total = conf.shape[0]
    suffix_correct = np.concatenate([np.cumsum(correct[::-1])[::-1], [0.0]])
    candidates = [0.0] + sorted(set(float(c) for c in conf))
    points = []
    for t in candidates:
        # first index with conf > t
        lo = int(np.searchsorted(conf, t, side="right"))
        count = total - lo
        if count == 0:
            points.append(SweepPoint(threshold=t, precision=None, exit_count=0))
        else:
            points.append(SweepPoint(
                threshold=t,
                precision=float(suffix_correct[lo] / count),
                exit_count=count))
    return points


def cpm_select_threshold(sweep: list, class_precision, margin: float):
    """Smallest candidate whose exited precision meets (1+margin) times the
    backbone's class precision with at least one exit; None when unattainable
    or when the backbone precision itself is undefined."""
    if class_precision is None:
        return DISABLED
    required = (1.0 + margin) * class_precision
    for point in sweep:  # ascending candidates
        if point.exit_count > 0 and point.precision is not None \
                and point.precision >= required:
            return float(point.threshold)
    return DISABLED


def branch_scores(heads: BranchHeads, view):
    """Predicted class and its confidence for every sample in a view, via the
    per-sample head path. Label-free; shared by calibration and the survivor
    filter so exit decisions replay bit-for-bit."""
    feats = view.level_features(heads.level)
    preds = np.empty(view.num_samples, dtype=np.int64)
    confs = np.empty(view.num_samples, dtype=np.float32)
    for pos in range(view.num_samples):
        probs = classify(heads.classification, feats[pos])
        pred = int(np.argmax(probs))
        conf = confidence_scores(heads.confidence, feats[pos])
        preds[pos] = pred
        confs[pos] = conf[pred]
    return preds, confs


def build_records(heads: BranchHeads, view, label_mode: str) -> list:
    """Run both heads over a calibration view, one record per sample."""
    resolved = resolve_labels(view, label_mode)
    preds, confs = branch_scores(heads, view)
    records = []
    for pos in range(view.num_samples):
        records.append(CalibrationRecord(
            predicted=int(preds[pos]),
            confidence=float(confs[pos]),
            correct=bool(preds[pos] == int(resolved[pos])),
        ))
    return records


def select_thresholds(records: list, precision_table: PrecisionTable,
                      margin: float) -> list:
    """Group records by predicted class, sweep each, select per-class
    thresholds. Classes without records come out DISABLED; record order for
    other classes cannot influence a class's threshold."""
    by_class: dict[int, list] = {}
    for rec in records:
        by_class.setdefault(rec.predicted, []).append(rec)
    thresholds = []
    for i in range(precision_table.num_classes):
        class_records = by_class.get(i, [])
        if not class_records:
            thresholds.append(DISABLED)
            continue
        sweep = precision_sweep(class_records)
        thresholds.append(cpm_select_threshold(
            sweep, precision_table.precision[i], margin))
    return thresholds


def calibrate_branch(heads: BranchHeads, view, precision_table: PrecisionTable,
                     margin: float, label_mode: str) -> list:
    """Per-class thresholds for one branch; classes without records or without
    an attainable precision target come out DISABLED."""
    if not -1.0 < margin <= 1.0:
        raise ValidationError(f"margin must be in (-1, 1], got {margin}")
    if view.num_samples == 0:
        log.warning("calibration view for level %d is empty; disabling all classes",
                    heads.level)
        return [DISABLED] * precision_table.num_classes
    records = build_records(heads, view, label_mode)
    return select_thresholds(records, precision_table, margin)
