"""Dataset format round-trips, masked views, synthetic generator contracts."""

import os

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from earlyexit.dataset_store import (
    FormatError,
    LevelMeta,
    LevelShape,
    MemoryDataset,
    SampleMask,
    SynthSpec,
    ValidationError,
    apply_mask,
    iter_samples,
    load_dataset,
    stream_level,
    synth_generate,
    verify_dataset,
    write_dataset,
)
from earlyexit.tensor_core import Rng


def small_dataset(n=5, num_classes=10, seed=3, with_logits=True):
    rng = Rng(seed)
    levels = [
        LevelMeta(level=1, d=4, h=2, w=2, cumulative_flops=100),
        LevelMeta(level=2, d=6, h=1, w=2, cumulative_flops=250),
    ]
    features = [rng.spawn(0).normal((n, 4, 2, 2)), rng.spawn(1).normal((n, 6, 1, 2))]
    labels = rng.spawn(2).integers(0, num_classes, n).astype(np.uint16)
    preds = rng.spawn(3).integers(0, num_classes, n).astype(np.uint16)
    logits = rng.spawn(4).normal((n, num_classes)) if with_logits else None
    return MemoryDataset(
        num_classes=num_classes, levels=levels, features=features, labels=labels,
        backbone_pred=preds, final_classifier_flops=500, backbone_logits=logits,
        provenance={"generator": "test"},
    )


PROBE_SPEC = SynthSpec(
    shapes=(LevelShape(12, 4, 4), LevelShape(12, 2, 2), LevelShape(12, 1, 1)),
    sizes=(700, 400, 300),
    cumulative_flops=(100, 200, 300),
    final_classifier_flops=150,
)


def probe_accuracy(train, val, level):
    xf = train.level_features(level).reshape(train.num_samples, -1)
    clf = LogisticRegression(max_iter=2000, random_state=0)
    clf.fit(xf, train.labels)
    xv = val.level_features(level).reshape(val.num_samples, -1)
    return float(np.mean(clf.predict(xv) == val.labels))


class TestRoundTrip:
    def test_write_read_identical_buffers(self, tmp_path):
        ds = small_dataset(n=5)
        write_dataset(ds, str(tmp_path / "d"))
        back = load_dataset(str(tmp_path / "d"))
        assert back.num_samples == 5
        assert back.num_classes == 10
        for level in (1, 2):
            np.testing.assert_array_equal(
                back.level_features(level), ds.level_features(level))
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.backbone_pred, ds.backbone_pred)
        np.testing.assert_array_equal(back.backbone_logits, ds.backbone_logits)
        assert back.provenance["generator"] == "test"

    def test_write_is_byte_deterministic(self, tmp_path):
        ds = small_dataset(n=7)
        write_dataset(ds, str(tmp_path / "a"))
        write_dataset(ds, str(tmp_path / "b"))
        for name in sorted(os.listdir(tmp_path / "a")):
            with open(tmp_path / "a" / name, "rb") as fa, open(tmp_path / "b" / name, "rb") as fb:
                assert fa.read() == fb.read(), name

    def test_optional_logits_absent(self, tmp_path):
        ds = small_dataset(with_logits=False)
        write_dataset(ds, str(tmp_path / "d"))
        back = load_dataset(str(tmp_path / "d"))
        assert back.backbone_logits is None

    def test_label_out_of_range_rejected(self, tmp_path):
        ds = small_dataset()
        ds.labels = ds.labels.copy()
        ds.labels[0] = 12
        with pytest.raises(ValidationError):
            write_dataset(ds, str(tmp_path / "d"))

    def test_unequal_level_sample_counts_rejected(self, tmp_path):
        ds = small_dataset()
        ds.features[1] = ds.features[1][:-1]
        with pytest.raises(ValidationError):
            write_dataset(ds, str(tmp_path / "d"))

    def test_nonincreasing_flops_rejected(self, tmp_path):
        ds = small_dataset()
        ds.levels[1] = LevelMeta(level=2, d=6, h=1, w=2, cumulative_flops=50)
        with pytest.raises(ValidationError):
            write_dataset(ds, str(tmp_path / "d"))


class TestBlobChecks:
    def test_truncated_feature_blob_is_format_error(self, tmp_path):
        ds = small_dataset()
        path = str(tmp_path / "d")
        write_dataset(ds, path)
        blob = tmp_path / "d" / "level1.feat"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(FormatError) as exc:
            verify_dataset(path)
        assert "level1.feat" in str(exc.value)

    def test_bad_magic_is_format_error(self, tmp_path):
        ds = small_dataset()
        path = str(tmp_path / "d")
        write_dataset(ds, path)
        blob = tmp_path / "d" / "level2.feat"
        data = bytearray(blob.read_bytes())
        data[:8] = b"XXXXXXXX"
        blob.write_bytes(bytes(data))
        with pytest.raises(FormatError) as exc:
            list(stream_level(path, 2))
        assert "level2.feat" in str(exc.value)

    def test_verify_accepts_good_dataset(self, tmp_path):
        ds = small_dataset(n=9)
        path = str(tmp_path / "d")
        write_dataset(ds, path)
        summary = verify_dataset(path)
        assert summary["num_samples"] == 9
        assert summary["has_logits"] is True

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(str(tmp_path / "nope"))


class TestStreaming:
    def test_mask_order_and_content(self, tmp_path):
        ds = small_dataset(n=10)
        path = str(tmp_path / "d")
        write_dataset(ds, path)
        got = list(stream_level(path, 1, SampleMask(np.array([2, 5]))))
        assert [i for i, _ in got] == [2, 5]
        np.testing.assert_array_equal(got[0][1], ds.features[0][2])
        np.testing.assert_array_equal(got[1][1], ds.features[0][5])

    def test_empty_mask_is_empty_iterator(self, tmp_path):
        ds = small_dataset(n=4)
        path = str(tmp_path / "d")
        write_dataset(ds, path)
        assert list(stream_level(path, 1, SampleMask(np.array([], dtype=np.int64)))) == []

    def test_full_stream_touches_each_sample_once(self, tmp_path):
        spec = SynthSpec(
            shapes=(LevelShape(10, 2, 2),), tier_fractions=(0.5, 0.5),
            sizes=(1000, 10, 10), cumulative_flops=(100,), final_classifier_flops=50)
        train, _, _ = synth_generate(spec, seed=0)
        path = str(tmp_path / "d")
        write_dataset(train, path)
        seen = [i for i, _ in stream_level(path, 1)]
        assert seen == list(range(1000))

    def test_out_of_range_mask_rejected(self, tmp_path):
        ds = small_dataset(n=4)
        path = str(tmp_path / "d")
        write_dataset(ds, path)
        with pytest.raises(ValidationError):
            list(stream_level(path, 1, SampleMask(np.array([3, 9]))))


class TestMasks:
    def test_mask_must_increase(self):
        with pytest.raises(ValidationError):
            SampleMask(np.array([3, 3]))
        with pytest.raises(ValidationError):
            SampleMask(np.array([5, 2]))

    def test_identity_mask_view(self):
        ds = small_dataset(n=6)
        view = apply_mask(ds, SampleMask.full(6))
        assert view.num_samples == 6
        np.testing.assert_array_equal(view.labels, ds.labels)
        np.testing.assert_array_equal(view.level_features(1), ds.features[0])

    def test_empty_view(self):
        ds = small_dataset(n=6)
        view = apply_mask(ds, SampleMask(np.array([], dtype=np.int64)))
        assert view.num_samples == 0
        assert view.labels.size == 0

    def test_mask_composition(self):
        ds = small_dataset(n=6)
        view = apply_mask(ds, SampleMask(np.array([0, 2, 4])))
        inner = apply_mask(view, SampleMask(np.array([1])))
        assert inner.mask.indices.tolist() == [2]
        np.testing.assert_array_equal(inner.level_features(2), ds.features[1][[2]])
        assert int(inner.labels[0]) == int(ds.labels[2])

    def test_view_out_of_range(self):
        ds = small_dataset(n=6)
        with pytest.raises(ValidationError):
            apply_mask(ds, SampleMask(np.array([7])))

    def test_iter_samples_over_view(self):
        ds = small_dataset(n=6)
        view = apply_mask(ds, SampleMask(np.array([1, 3])))
        rows = list(iter_samples(view))
        assert [r[0] for r in rows] == [0, 1]
        np.testing.assert_array_equal(rows[1][1][1], ds.features[0][3])
        assert rows[0][2] == int(ds.labels[1])


class TestSynth:
    def test_same_seed_bit_identical(self):
        a = synth_generate(PROBE_SPEC, seed=11)
        b = synth_generate(PROBE_SPEC, seed=11)
        for da, db in zip(a, b):
            np.testing.assert_array_equal(da.labels, db.labels)
            np.testing.assert_array_equal(da.backbone_pred, db.backbone_pred)
            np.testing.assert_array_equal(da.backbone_logits, db.backbone_logits)
            for lv in (1, 2, 3):
                np.testing.assert_array_equal(
                    da.level_features(lv), db.level_features(lv))

    def test_different_seed_differs(self):
        a = synth_generate(PROBE_SPEC, seed=11)[0]
        b = synth_generate(PROBE_SPEC, seed=12)[0]
        assert not np.array_equal(a.level_features(1), b.level_features(1))

    def test_easy_tier_probe_reaches_090(self):
        spec = SynthSpec(**{**PROBE_SPEC.__dict__, "tier_fractions": (1.0, 0.0, 0.0, 0.0)})
        train, val, _ = synth_generate(spec, seed=5)
        assert probe_accuracy(train, val, level=1) >= 0.9

    def test_hard_tier_probe_near_chance(self):
        spec = SynthSpec(**{**PROBE_SPEC.__dict__, "tier_fractions": (0.0, 0.0, 0.0, 1.0)})
        train, val, _ = synth_generate(spec, seed=5)
        assert probe_accuracy(train, val, level=1) <= 0.2

    def test_signal_appears_at_tier_level_and_above(self):
        spec = SynthSpec(**{**PROBE_SPEC.__dict__, "tier_fractions": (0.0, 1.0, 0.0, 0.0)})
        train, val, _ = synth_generate(spec, seed=6)
        assert probe_accuracy(train, val, level=1) <= 0.2
        assert probe_accuracy(train, val, level=2) >= 0.9
        assert probe_accuracy(train, val, level=3) >= 0.9

    def test_backbone_error_rate_and_logits_argmax(self):
        train, _, _ = synth_generate(PROBE_SPEC, seed=7)
        acc = float(np.mean(train.backbone_pred == train.labels))
        assert abs(acc - 0.92) < 0.04
        np.testing.assert_array_equal(
            np.argmax(train.backbone_logits, axis=1),
            train.backbone_pred.astype(np.int64))

    def test_tier_fractions_must_sum_to_one(self):
        spec = SynthSpec(**{**PROBE_SPEC.__dict__, "tier_fractions": (0.5, 0.2, 0.1, 0.1)})
        with pytest.raises(ValidationError):
            synth_generate(spec, seed=0)

    def test_split_sizes_and_tier_counts_exact(self):
        train, val, test = synth_generate(PROBE_SPEC, seed=9)
        assert (train.num_samples, val.num_samples, test.num_samples) == (700, 400, 300)
        counts = np.bincount(train.tiers, minlength=5)[1:]
        assert counts.tolist() == [280, 140, 70, 210]

    def test_round_trip_through_disk(self, tmp_path):
        train, _, _ = synth_generate(PROBE_SPEC, seed=4)
        path = str(tmp_path / "t")
        write_dataset(train, path)
        verify_dataset(path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.level_features(2), train.level_features(2))
        np.testing.assert_array_equal(back.labels, train.labels)
