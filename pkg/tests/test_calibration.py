"""Threshold calibration: frozen sweeps, brute-force oracle, monotonicity."""

import logging

import numpy as np
import pytest

from earlyexit.calibration import (
    DISABLED,
    CalibrationRecord,
    PrecisionTable,
    backbone_class_precision,
    build_records,
    calibrate_branch,
    cpm_select_threshold,
    precision_sweep,
)
from earlyexit.dataset_store import (
    LevelShape,
    SampleMask,
    SynthSpec,
    ValidationError,
    apply_mask,
    synth_generate,
)
from earlyexit.calibration import select_thresholds
from earlyexit.tensor_core import Rng
from earlyexit.trainer import TrainConfig, train_classification_head, train_confidence_head
from earlyexit.branch_heads import BranchHeads


def records_from(confidences, corrects, cls=0):
    return [CalibrationRecord(predicted=cls, confidence=c, correct=bool(k))
            for c, k in zip(confidences, corrects)]


def brute_force_select(records, class_precision, margin):
    """Independent enumeration over all candidates; the oracle."""
    if class_precision is None:
        return None
    required = (1.0 + margin) * class_precision
    for t in [0.0] + sorted({r.confidence for r in records}):
        exited = [r for r in records if r.confidence > t]
        if exited and sum(r.correct for r in exited) / len(exited) >= required:
            return t
    return None


def random_records(rng, n, duplicates=False):
    if duplicates:
        grid = np.round(rng.uniform((n,), dtype=np.float64) * 8) / 10 + 0.05
        confs = grid
    else:
        confs = rng.uniform((n,), dtype=np.float64) * 0.98 + 0.01
    bits = rng.integers(0, 2, n)
    return records_from(confs.tolist(), bits.tolist())


class TestBackbonePrecision:
    class _Split:
        def __init__(self, labels, preds, n):
            self.labels = np.array(labels, dtype=np.uint16)
            self.backbone_pred = np.array(preds, dtype=np.uint16)
            self.num_classes = n

    def test_direct_count_example(self):
        table = backbone_class_precision(self._Split([0, 1, 1], [0, 0, 1], 3))
        assert table.precision[0] == pytest.approx(0.5)
        assert table.precision[1] == pytest.approx(1.0)
        assert table.precision[2] is None
        assert table.support == [2, 1, 0]

    def test_perfect_backbone(self):
        table = backbone_class_precision(self._Split([0, 1, 2], [0, 1, 2], 3))
        assert table.precision == [1.0, 1.0, 1.0]

    def test_never_predicted_is_undefined_not_zero(self):
        table = backbone_class_precision(self._Split([2, 2], [0, 0], 3))
        assert table.precision[0] == 0.0
        assert table.precision[2] is None


class TestPrecisionSweep:
    def test_hand_enumerated_sweep(self):
        sweep = precision_sweep(records_from([0.9, 0.8, 0.7, 0.6], [1, 1, 0, 1]))
        as_tuples = [(p.threshold, p.precision, p.exit_count) for p in sweep]
        assert as_tuples == [
            (0.0, 0.75, 4),
            (0.6, 2.0 / 3.0, 3),
            (0.7, 1.0, 2),
            (0.8, 1.0, 1),
            (0.9, None, 0),
        ]

    def test_single_correct_record(self):
        sweep = precision_sweep(records_from([0.4], [1]))
        assert [(p.threshold, p.precision, p.exit_count) for p in sweep] == [
            (0.0, 1.0, 1), (0.4, None, 0)]

    def test_empty_records(self):
        assert precision_sweep([]) == []

    def test_duplicate_confidences_collapse_to_one_candidate(self):
        sweep = precision_sweep(records_from([0.5, 0.5, 0.5], [1, 0, 1]))
        assert [p.threshold for p in sweep] == [0.0, 0.5]
        assert sweep[0].exit_count == 3
        assert sweep[1].exit_count == 0


class TestCpmSelect:
    def test_margin_zero_picks_bottom(self):
        sweep = precision_sweep(records_from([0.9, 0.8, 0.7, 0.6], [1, 1, 0, 1]))
        assert cpm_select_threshold(sweep, 0.7, 0.0) == 0.0

    def test_large_margin_climbs(self):
        sweep = precision_sweep(records_from([0.9, 0.8, 0.7, 0.6], [1, 1, 0, 1]))
        assert cpm_select_threshold(sweep, 0.7, 0.3) == 0.7

    def test_unattainable_requirement_disables(self):
        sweep = precision_sweep(records_from([0.9, 0.8], [1, 1]))
        assert cpm_select_threshold(sweep, 0.9, 0.2) is DISABLED

    def test_undefined_backbone_precision_disables(self):
        sweep = precision_sweep(records_from([0.9], [1]))
        assert cpm_select_threshold(sweep, None, 0.0) is DISABLED

    def test_oracle_agreement_randomized(self):
        rng = Rng(23)
        for trial in range(300):
            r = rng.spawn(trial)
            n = int(r.integers(1, 40))
            recs = random_records(r.spawn(0), n, duplicates=trial % 3 == 0)
            pr = float(r.spawn(1).uniform((1,), dtype=np.float64)[0])
            m = float(r.spawn(2).uniform((1,), dtype=np.float64)[0] * 1.2 - 0.2)
            sweep = precision_sweep(recs)
            got = cpm_select_threshold(sweep, pr, m)
            want = brute_force_select(recs, pr, m)
            assert got == want, (trial, got, want)

    def test_constraint_holds_exactly_when_enabled(self):
        rng = Rng(29)
        for trial in range(200):
            r = rng.spawn(trial)
            recs = random_records(r.spawn(0), int(r.integers(1, 30)),
                                  duplicates=trial % 2 == 0)
            pr = float(r.spawn(1).uniform((1,), dtype=np.float64)[0])
            m = float(r.spawn(2).uniform((1,), dtype=np.float64)[0] * 0.4 - 0.1)
            t = cpm_select_threshold(precision_sweep(recs), pr, m)
            if t is DISABLED:
                continue
            exited = [x for x in recs if x.confidence > t]
            assert len(exited) >= 1
            precision = sum(x.correct for x in exited) / len(exited)
            assert precision >= (1.0 + m) * pr  # zero tolerance

    def test_maximality_next_lower_candidate_fails(self):
        rng = Rng(31)
        for trial in range(100):
            r = rng.spawn(trial)
            recs = random_records(r.spawn(0), int(r.integers(2, 30)),
                                  duplicates=trial % 2 == 0)
            pr = float(r.spawn(1).uniform((1,), dtype=np.float64)[0])
            m = 0.05
            sweep = precision_sweep(recs)
            t = cpm_select_threshold(sweep, pr, m)
            if t is DISABLED:
                continue
            required = (1.0 + m) * pr
            for point in sweep:
                if point.threshold < t:
                    assert point.precision is None or point.precision < required


def order_key(t):
    # candidate ordering with DISABLED as top
    return (1, 0.0) if t is None else (0, t)


class TestMonotonicity:
    def test_threshold_and_exits_monotone_in_margin(self):
        rng = Rng(37)
        for trial in range(60):
            r = rng.spawn(trial)
            recs = random_records(r.spawn(0), int(r.integers(1, 50)),
                                  duplicates=trial % 2 == 0)
            pr = float(r.spawn(1).uniform((1,), dtype=np.float64)[0])
            ms = np.sort(r.spawn(2).uniform((2,), dtype=np.float64) * 1.0 - 0.2)
            m_lo, m_hi = float(ms[0]), float(ms[1])
            sweep = precision_sweep(recs)
            t_lo = cpm_select_threshold(sweep, pr, m_lo)
            t_hi = cpm_select_threshold(sweep, pr, m_hi)
            assert order_key(t_hi) >= order_key(t_lo)
            exits = lambda t: 0 if t is None else sum(x.confidence > t for x in recs)
            assert exits(t_hi) <= exits(t_lo)


class TestSelectThresholds:
    def test_per_class_independence_under_permutation(self):
        rng = Rng(41)
        recs_a = []
        for cls in range(3):
            r = rng.spawn(cls)
            for rec in random_records(r, 12, duplicates=True):
                recs_a.append(CalibrationRecord(cls, rec.confidence, rec.correct))
        # same multiset, class-1 records reversed and interleaved differently
        class1 = [x for x in recs_a if x.predicted == 1][::-1]
        rest = [x for x in recs_a if x.predicted != 1]
        recs_b = rest[:10] + class1 + rest[10:]
        table = PrecisionTable(precision=[0.6, 0.7, 0.8], support=[5, 5, 5])
        ta = select_thresholds(recs_a, table, 0.0)
        tb = select_thresholds(recs_b, table, 0.0)
        assert ta == tb

    def test_class_without_records_disabled(self):
        table = PrecisionTable(precision=[0.5, 0.5], support=[3, 3])
        recs = records_from([0.9, 0.8], [1, 1], cls=0)
        out = select_thresholds(recs, table, 0.0)
        assert out[0] == 0.0
        assert out[1] is DISABLED


def tiny_trained_branch(seed=3):
    spec = SynthSpec(
        shapes=(LevelShape(12, 4, 4),),
        tier_fractions=(0.7, 0.3),
        sizes=(600, 300, 100),
        cumulative_flops=(100,),
        final_classifier_flops=50,
    )
    train, val, _ = synth_generate(spec, seed=seed)
    cfg = TrainConfig(epochs=40, batch_size=64, seed=7)
    clf, _ = train_classification_head(train, 1, 8, cfg)
    conf, _ = train_confidence_head(train, 1, clf, 8, cfg)
    return BranchHeads(level=1, classification=clf, confidence=conf), train, val


class TestCalibrateBranch:
    def test_thresholds_satisfy_constraint_exactly(self):
        heads, _, val = tiny_trained_branch()
        table = backbone_class_precision(val)
        for margin in (-0.02, 0.0, 0.05):
            thresholds = calibrate_branch(heads, val, table, margin, "absolute")
            records = build_records(heads, val, "absolute")
            enabled = 0
            for i, t in enumerate(thresholds):
                if t is DISABLED:
                    continue
                enabled += 1
                exited = [r for r in records if r.predicted == i and r.confidence > t]
                assert exited
                precision = sum(r.correct for r in exited) / len(exited)
                assert precision >= (1.0 + margin) * table.precision[i]
            assert enabled >= 1  # easy data must enable something

    def test_empty_view_all_disabled_with_warning(self, caplog):
        heads, train, val = tiny_trained_branch()
        empty = apply_mask(val, SampleMask(np.array([], dtype=np.int64)))
        table = backbone_class_precision(val)
        with caplog.at_level(logging.WARNING):
            out = calibrate_branch(heads, empty, table, 0.0, "absolute")
        assert out == [DISABLED] * val.num_classes
        assert any("empty" in rec.message for rec in caplog.records)

    def test_margin_range_validated(self):
        heads, _, val = tiny_trained_branch()
        table = backbone_class_precision(val)
        with pytest.raises(ValidationError):
            calibrate_branch(heads, val, table, -1.0, "absolute")
        with pytest.raises(ValidationError):
            calibrate_branch(heads, val, table, 1.5, "absolute")

    def test_impossible_margin_disables_everything(self):
        heads, _, val = tiny_trained_branch()
        table = backbone_class_precision(val)
        out = calibrate_branch(heads, val, table, 1.0, "absolute")
        defined = [p for p in table.precision if p is not None and p >= 0.5]
        assert len(defined) > 0
        for t, p in zip(out, table.precision):
            if p is not None and p >= 0.5:
                assert t is DISABLED

    def test_distillation_mode_scores_against_backbone(self):
        heads, _, val = tiny_trained_branch()
        ra = build_records(heads, val, "absolute")
        rd = build_records(heads, val, "distillation")
        assert [r.predicted for r in ra] == [r.predicted for r in rd]
        assert [r.confidence for r in ra] == [r.confidence for r in rd]
        flips = sum(a.correct != d.correct for a, d in zip(ra, rd))
        disagree = int(np.count_nonzero(val.labels != val.backbone_pred))
        assert flips > 0
        assert flips <= disagree

    def test_confidences_strictly_inside_unit_interval(self):
        heads, _, val = tiny_trained_branch()
        for rec in build_records(heads, val, "absolute"):
            assert 0.0 < rec.confidence < 1.0
