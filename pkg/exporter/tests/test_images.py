"""Tree enumeration, label mapping, subsetting, decoding."""

import os

import numpy as np
import pytest
from PIL import Image

from featexport.images import (
    TreeError,
    enumerate_split,
    load_images,
    split_directory,
    subset_per_class,
)

CLASS_NAMES = ("airplane", "bird", "cat", "dog", "ship")


def make_tree(root, split_sizes, classes=CLASS_NAMES, seed=0, size=32,
              split_aliases=None):
    """Write a class-per-directory PNG tree; returns the root path."""
    rng = np.random.default_rng(seed)
    for split, count in split_sizes.items():
        dirname = (split_aliases or {}).get(split, split)
        for name in classes:
            d = os.path.join(root, dirname, name)
            os.makedirs(d, exist_ok=True)
            for i in range(count):
                arr = rng.integers(0, 256, size=(size, size, 3),
                                   dtype=np.uint8)
                Image.fromarray(arr).save(os.path.join(d, f"img{i:04d}.png"))
    return root


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("tree"))
    return make_tree(root, {"train": 6, "validation": 3, "test": 3})


class TestEnumerate:
    def test_order_and_labels(self, tree):
        samples, class_names = enumerate_split(tree, "train")
        assert class_names == sorted(CLASS_NAMES)
        assert len(samples) == 6 * len(CLASS_NAMES)
        labels = [s.label for s in samples]
        assert labels == sorted(labels)
        for s in samples:
            assert class_names[s.label] == s.class_name
            assert s.class_name in s.path

    def test_within_class_filename_order(self, tree):
        samples, _ = enumerate_split(tree, "validation")
        first_class = [s for s in samples if s.label == 0]
        names = [os.path.basename(s.path) for s in first_class]
        assert names == sorted(names)

    def test_valid_alias_for_validation(self, tmp_path):
        root = make_tree(str(tmp_path), {"validation": 2},
                         split_aliases={"validation": "valid"})
        assert split_directory(root, "validation").endswith("valid")
        samples, _ = enumerate_split(root, "validation")
        assert len(samples) == 2 * len(CLASS_NAMES)

    def test_missing_split_rejected(self, tree):
        with pytest.raises(TreeError, match="no test2|unknown split"):
            split_directory(tree, "test2")

    def test_absent_directory_rejected(self, tmp_path):
        with pytest.raises(TreeError, match="no train directory"):
            enumerate_split(str(tmp_path), "train")

    def test_empty_tree_rejected(self, tmp_path):
        os.makedirs(tmp_path / "train" / "cat")
        with pytest.raises(TreeError, match="no images"):
            enumerate_split(str(tmp_path), "train")

    def test_non_image_files_ignored(self, tmp_path):
        root = make_tree(str(tmp_path), {"train": 2}, classes=("a",))
        with open(os.path.join(root, "train", "a", "notes.txt"), "w") as fh:
            fh.write("junk")
        samples, _ = enumerate_split(root, "train")
        assert len(samples) == 2


class TestSubset:
    def test_full_fraction_is_identity(self, tree):
        samples, _ = enumerate_split(tree, "train")
        assert subset_per_class(samples, 1.0) == samples

    def test_half_keeps_half_per_class(self, tree):
        samples, _ = enumerate_split(tree, "train")
        kept = subset_per_class(samples, 0.5)
        assert len(kept) == 3 * len(CLASS_NAMES)
        for label in range(len(CLASS_NAMES)):
            assert sum(1 for s in kept if s.label == label) == 3

    def test_tiny_fraction_keeps_one_per_class(self, tree):
        samples, _ = enumerate_split(tree, "train")
        kept = subset_per_class(samples, 0.01)
        assert len(kept) == len(CLASS_NAMES)
        assert sorted(s.label for s in kept) == list(range(len(CLASS_NAMES)))

    def test_kept_samples_evenly_spaced(self, tree):
        samples, _ = enumerate_split(tree, "train")
        kept = subset_per_class(samples, 0.5)
        first = [os.path.basename(s.path) for s in kept if s.label == 0]
        assert first == ["img0000.png", "img0002.png", "img0004.png"]

    def test_bad_fraction_rejected(self, tree):
        samples, _ = enumerate_split(tree, "train")
        for frac in (0.0, -0.1, 1.5):
            with pytest.raises(TreeError):
                subset_per_class(samples, frac)

    def test_deterministic(self, tree):
        samples, _ = enumerate_split(tree, "train")
        assert subset_per_class(samples, 0.34) == subset_per_class(samples,
                                                                   0.34)


class TestLoad:
    def test_loads_as_uint8_batch(self, tree):
        samples, _ = enumerate_split(tree, "test")
        px = load_images(samples[:4], 32)
        assert px.shape == (4, 32, 32, 3)
        assert px.dtype == np.uint8

    def test_decode_matches_written_pixels(self, tmp_path):
        rng = np.random.default_rng(9)
        arr = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        os.makedirs(tmp_path / "train" / "a")
        Image.fromarray(arr).save(tmp_path / "train" / "a" / "x.png")
        samples, _ = enumerate_split(str(tmp_path), "train")
        px = load_images(samples, 32)
        np.testing.assert_array_equal(px[0], arr)

    def test_wrong_size_rejected(self, tmp_path):
        root = make_tree(str(tmp_path), {"train": 1}, classes=("a",),
                         size=16)
        samples, _ = enumerate_split(root, "train")
        with pytest.raises(TreeError, match="16x16"):
            load_images(samples, 32)

    def test_corrupt_file_rejected(self, tmp_path):
        os.makedirs(tmp_path / "train" / "a")
        with open(tmp_path / "train" / "a" / "x.png", "wb") as fh:
            fh.write(b"\x89PNG but not really")
        samples, _ = enumerate_split(str(tmp_path), "train")
        with pytest.raises(TreeError, match="cannot decode"):
            load_images(samples, 32)
