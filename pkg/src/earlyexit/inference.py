"""Selective inference over stored feature maps, metrics, and curve output.

Decision rule, per sample: walk the trained branches in level order; at each
one take the classification argmax and that class's confidence, exit with the
branch prediction when the class threshold is enabled and confidence exceeds
it strictly; otherwise fall through to the stored backbone prediction.

Cost accounting charges what a deployed cascade would execute:

  exit at branch level l   cumulative backbone cost through block l, plus both
                           heads at every branch visited so far
  no exit (final)          full backbone cost, every visited branch's heads,
                           plus the final classifier stage

Branches that were never trained (upstream guard failures) have no heads to
run, so they are skipped and charged nothing. Trained branches whose classes
all calibrated to disabled are still visited and charged: the heads must run
before the decision can decline.

The reduction baseline is the pure backbone cost (final stage included, branch
overhead excluded), so a bundle that never exits shows a small negative
reduction rather than hiding its overhead.

Floats in CSV output are written with repr, the shortest digit string that
parses back to the identical value.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .branch_heads import classify, confidence_scores, head_flops
from .calibration import DISABLED
from .dataset_store import ValidationError, iter_samples
from .pipeline import ModelBundle, PipelineConfig, recalibrate, run_pipeline
from .tensor_core import ShapeError

FINAL = None  # exit_level value for samples the branches decline


@dataclass
class Sample:
    """One test item: per-level feature maps plus the backbone's outputs."""

    features: dict
    backbone_pred: int
    backbone_logits: np.ndarray | None = None


@dataclass
class BranchTrace:
    level: int
    predicted: int
    confidence: float
    exited: bool


@dataclass
class InferenceResult:
    predicted: int
    exit_level: int | None   # branch level, or FINAL (None)
    flops: int
    trace: list = field(default_factory=list)

    @property
    def is_final(self) -> bool:
        return self.exit_level is FINAL


@dataclass
class EvalReport:
    selective_accuracy: float
    backbone_accuracy: float
    degradation_pp: float
    mean_flops: float
    baseline_flops: int
    reduction: float
    exit_ratios: dict          # branch level -> fraction exiting there
    final_ratio: float
    per_class_exit: list       # per ground-truth class: fraction exiting early
    num_samples: int


@dataclass
class CurvePoint:
    margin: float
    degradation_pp: float
    reduction: float
    config_id: str
    report: EvalReport | None = None


def check_compatible(bundle: ModelBundle, levels):
    """Bundle-vs-dataset geometry check; raises ShapeError on any mismatch."""
    by_level = {m.level: m for m in levels}
    for rec in bundle.branches:
        meta = by_level.get(rec.level)
        if meta is None:
            raise ShapeError(
                f"bundle branch level {rec.level} not present in dataset "
                f"levels {sorted(by_level)}")
        if (rec.d, rec.h, rec.w) != (meta.d, meta.h, meta.w):
            raise ShapeError(
                f"branch {rec.level} expects features {(rec.d, rec.h, rec.w)}, "
                f"dataset provides {(meta.d, meta.h, meta.w)}")


def _branch_cost(rec, num_classes: int) -> int:
    return 2 * head_flops(rec.k, rec.d, rec.h, rec.w, num_classes)


def selective_infer(bundle: ModelBundle, sample: Sample, levels,
                    final_classifier_flops: int) -> InferenceResult:
    """Walk the branch cascade for one sample; ``levels`` is the dataset's
    level metadata, which supplies the cumulative backbone cost table."""
    cum = {m.level: m.cumulative_flops for m in levels}
    n_classes = bundle.num_classes
    visited_cost = 0
    trace = []
    for rec in bundle.branches:
        if not rec.trained:
            continue
        feat = sample.features.get(rec.level)
        if feat is None:
            raise ShapeError(f"sample lacks features for branch level {rec.level}")
        if feat.shape != (rec.d, rec.h, rec.w):
            raise ShapeError(
                f"branch {rec.level} expects features {(rec.d, rec.h, rec.w)}, "
                f"sample has {feat.shape}")
        probs = classify(rec.heads.classification, feat)
        pred = int(np.argmax(probs))
        conf = confidence_scores(rec.heads.confidence, feat)
        r = float(conf[pred])
        visited_cost += _branch_cost(rec, n_classes)
        t = rec.thresholds[pred]
        exits = t is not DISABLED and r > t
        trace.append(BranchTrace(level=rec.level, predicted=pred,
                                 confidence=r, exited=exits))
        if exits:
            return InferenceResult(
                predicted=pred, exit_level=rec.level,
                flops=cum[rec.level] + visited_cost, trace=trace)
    if sample.backbone_logits is not None:
        final_pred = int(np.argmax(sample.backbone_logits))
    else:
        final_pred = int(sample.backbone_pred)
    full_backbone = levels[-1].cumulative_flops if levels else 0
    return InferenceResult(
        predicted=final_pred, exit_level=FINAL,
        flops=full_backbone + visited_cost + final_classifier_flops,
        trace=trace)


def evaluate(bundle: ModelBundle, dataset) -> EvalReport:
    """Selective accuracy, cost, and exit composition over a test split.

    The test split is never filtered and accuracy is always against ground
    truth, whatever label mode trained the bundle.
    """
    if dataset.num_samples == 0:
        raise ValidationError("cannot evaluate on an empty test set")
    check_compatible(bundle, dataset.levels)
    baseline = dataset.levels[-1].cumulative_flops + dataset.final_classifier_flops
    n = dataset.num_samples
    n_classes = dataset.num_classes
    labels = dataset.labels
    correct_sel = 0
    correct_backbone = int(np.sum(dataset.backbone_pred.astype(np.int64)
                                  == labels.astype(np.int64)))
    total_flops = 0
    exit_counts: dict[int, int] = {rec.level: 0 for rec in bundle.branches
                                   if rec.trained}
    final_count = 0
    class_total = np.zeros(n_classes, dtype=np.int64)
    class_early = np.zeros(n_classes, dtype=np.int64)
    for pos, feats, label, backbone_pred, logits in iter_samples(dataset):
        sample = Sample(features=feats, backbone_pred=backbone_pred,
                        backbone_logits=logits)
        res = selective_infer(bundle, sample, dataset.levels,
                              dataset.final_classifier_flops)
        total_flops += res.flops
        if res.predicted == int(label):
            correct_sel += 1
        class_total[int(label)] += 1
        if res.is_final:
            final_count += 1
        else:
            exit_counts[res.exit_level] += 1
            class_early[int(label)] += 1
    selective_acc = correct_sel / n
    backbone_acc = correct_backbone / n
    mean_flops = total_flops / n
    per_class = [float(class_early[c] / class_total[c]) if class_total[c] else 0.0
                 for c in range(n_classes)]
    return EvalReport(
        selective_accuracy=selective_acc,
        backbone_accuracy=backbone_acc,
        degradation_pp=(backbone_acc - selective_acc) * 100.0,
        mean_flops=mean_flops,
        baseline_flops=baseline,
        reduction=1.0 - mean_flops / baseline,
        exit_ratios={lv: c / n for lv, c in sorted(exit_counts.items())},
        final_ratio=final_count / n,
        per_class_exit=per_class,
        num_samples=n)


def config_id(cfg: PipelineConfig, margin: float) -> str:
    scheme = "boosted" if cfg.boosted else "nonboosted"
    k = cfg.k
    k_txt = "/".join(str(int(v)) for v in k) if isinstance(k, (list, tuple)) \
        else str(int(k))
    return f"{scheme}-k{k_txt}-{cfg.label_mode}-m{margin:g}"


def sweep_curve(cfg: PipelineConfig, train_ds, val_ds, test_ds,
                margins: list) -> list:
    """One evaluated point per margin, sorted by reduction.

    Boosted sweeps re-run the whole pipeline per margin, because upstream
    filtering depends on the thresholds the margin produces. Non-boosted
    sweeps train once and only recalibrate, since every branch always sees
    the full splits.
    """
    from dataclasses import replace
    for m in margins:
        if not -1.0 < m <= 1.0:
            raise ValidationError(f"margin must be in (-1, 1], got {m}")
    points = []
    if cfg.boosted:
        for m in margins:
            bundle = run_pipeline(replace(cfg, margin=m), train_ds, val_ds)
            report = evaluate(bundle, test_ds)
            points.append(CurvePoint(
                margin=m, degradation_pp=report.degradation_pp,
                reduction=report.reduction,
                config_id=config_id(cfg, m), report=report))
    else:
        base = run_pipeline(replace(cfg, margin=margins[0]) if margins else cfg,
                            train_ds, val_ds)
        for m in margins:
            bundle = base if m == base.margin \
                else recalibrate(base, replace(cfg, margin=m), val_ds)
            report = evaluate(bundle, test_ds)
            points.append(CurvePoint(
                margin=m, degradation_pp=report.degradation_pp,
                reduction=report.reduction,
                config_id=config_id(cfg, m), report=report))
    return sorted(points, key=lambda p: p.reduction)


# ---------------------------------------------------------------------------
# report emission


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _branch_levels(points: list) -> list:
    levels = set()
    for p in points:
        if p.report is not None:
            levels.update(p.report.exit_ratios)
    return sorted(levels)


def curve_csv(points: list) -> str:
    """One row per curve point; floats use repr so parsing is lossless."""
    levels = _branch_levels(points)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = ["config_id", "boosted", "mode", "k", "margin",
              "degradation_pp", "reduction"]
    header += [f"exit_b{lv}" for lv in levels] + ["exit_final"]
    writer.writerow(header)
    for p in points:
        scheme, k_txt, mode, _ = p.config_id.split("-", 3)
        row = [p.config_id, _fmt(scheme == "boosted"), mode, k_txt[1:],
               _fmt(float(p.margin)), _fmt(float(p.degradation_pp)),
               _fmt(float(p.reduction))]
        ratios = p.report.exit_ratios if p.report else {}
        row += [_fmt(float(ratios.get(lv, 0.0))) for lv in levels]
        row.append(_fmt(float(p.report.final_ratio)) if p.report else "")
        writer.writerow(row)
    return out.getvalue()


def report_csv(report: EvalReport) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    levels = sorted(report.exit_ratios)
    header = ["selective_accuracy", "backbone_accuracy", "degradation_pp",
              "mean_flops", "baseline_flops", "reduction"]
    header += [f"exit_b{lv}" for lv in levels] + ["exit_final", "num_samples"]
    writer.writerow(header)
    row = [_fmt(float(report.selective_accuracy)),
           _fmt(float(report.backbone_accuracy)),
           _fmt(float(report.degradation_pp)),
           _fmt(float(report.mean_flops)),
           str(report.baseline_flops),
           _fmt(float(report.reduction))]
    row += [_fmt(float(report.exit_ratios[lv])) for lv in levels]
    row += [_fmt(float(report.final_ratio)), str(report.num_samples)]
    writer.writerow(row)
    return out.getvalue()


def report_text(report: EvalReport) -> str:
    lines = [
        f"samples:             {report.num_samples}",
        f"selective accuracy:  {report.selective_accuracy:.4f}",
        f"backbone accuracy:   {report.backbone_accuracy:.4f}",
        f"degradation:         {report.degradation_pp:.3f} pp",
        f"mean flops/sample:   {report.mean_flops:.1f}",
        f"backbone baseline:   {report.baseline_flops}",
        f"flops reduction:     {report.reduction:.4f}",
    ]
    for lv in sorted(report.exit_ratios):
        lines.append(f"exit at branch {lv}:   {report.exit_ratios[lv]:.4f}")
    lines.append(f"no early exit:       {report.final_ratio:.4f}")
    return "\n".join(lines) + "\n"


def curve_text(points: list) -> str:
    lines = []
    for p in points:
        lines.append(f"{p.config_id}: margin={p.margin:g} "
                     f"degradation={p.degradation_pp:.3f}pp "
                     f"reduction={p.reduction:.4f}")
    return "\n".join(lines) + ("\n" if lines else "")


def emit_report(obj, fmt: str, path: str):
    """Write an EvalReport or a curve (list of CurvePoints) as csv or text."""
    if fmt not in ("csv", "text"):
        raise ValidationError(f"unknown report format {fmt!r}")
    if isinstance(obj, EvalReport):
        payload = report_csv(obj) if fmt == "csv" else report_text(obj)
    else:
        payload = curve_csv(obj) if fmt == "csv" else curve_text(obj)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(payload)


def trace_csv(results: list, branch_levels: list) -> str:
    """One row per sample: exit level, per-branch decisions, charged cost.
    Unvisited branches leave their cells empty."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = ["index", "exit_level"]
    for lv in branch_levels:
        header += [f"pred_b{lv}", f"conf_b{lv}"]
    header.append("flops")
    writer.writerow(header)
    for idx, res in enumerate(results):
        by_level = {t.level: t for t in res.trace}
        row = [str(idx), "FINAL" if res.is_final else str(res.exit_level)]
        for lv in branch_levels:
            t = by_level.get(lv)
            if t is None:
                row += ["", ""]
            else:
                row += [str(t.predicted), repr(float(t.confidence))]
        row.append(str(res.flops))
        writer.writerow(row)
    return out.getvalue()


def write_trace(results: list, branch_levels: list, path: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(trace_csv(results, branch_levels))
