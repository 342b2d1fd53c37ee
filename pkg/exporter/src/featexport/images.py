"""Image-tree enumeration, deterministic subsetting, and decoding.

The expected layout is the standard class-per-directory arrangement:
root/<split>/<class_name>/*.png. Class indices are the position of the class
directory name in sorted order, which for CINIC-10 and CIFAR-10 trees
reproduces the usual alphabetical label mapping. The split directory
"validation" also matches an on-disk "valid", which is how CINIC-10 ships.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

# on-disk aliases per logical split, tried in order
SPLIT_DIRS = {
    "train": ("train",),
    "validation": ("validation", "valid"),
    "test": ("test",),
}


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class TreeSample:
    path: str
    label: int
    class_name: str


def split_directory(root: str, split: str) -> str:
    if split not in SPLIT_DIRS:
        raise TreeError(f"unknown split {split!r}, expected one of "
                        f"{sorted(SPLIT_DIRS)}")
    for alias in SPLIT_DIRS[split]:
        candidate = os.path.join(root, alias)
        if os.path.isdir(candidate):
            return candidate
    raise TreeError(f"no {split} directory under {root}")


def enumerate_split(root: str, split: str) -> tuple:
    """All samples of one split ordered by (class, filename).

    Returns (samples, class_names); the label of a sample is the index of
    its class directory in the sorted class list.
    """
    base = split_directory(root, split)
    class_names = sorted(
        d for d in os.listdir(base)
        if os.path.isdir(os.path.join(base, d)))
    if not class_names:
        raise TreeError(f"no class directories under {base}")
    samples = []
    for label, name in enumerate(class_names):
        class_dir = os.path.join(base, name)
        files = sorted(
            f for f in os.listdir(class_dir)
            if f.lower().endswith(IMAGE_EXTENSIONS))
        for f in files:
            samples.append(TreeSample(path=os.path.join(class_dir, f),
                                      label=label, class_name=name))
    if not samples:
        raise TreeError(f"no images under {base}")
    return samples, class_names


def subset_per_class(samples: list, fraction: float) -> list:
    """Deterministic per-class subset, evenly spaced in filename order.

    Each class keeps max(1, round(fraction * count)) samples, so the class
    balance of the tree survives small fractions. Output order is the
    enumeration order restricted to the kept samples.
    """
    if not 0.0 < fraction <= 1.0:
        raise TreeError(f"subset fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(samples)
    by_label = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s)
    kept = []
    for label in sorted(by_label):
        group = by_label[label]
        n = len(group)
        m = max(1, int(fraction * n + 0.5))
        kept.extend(group[(j * n) // m] for j in range(m))
    return kept


def load_images(samples: list, size: int) -> np.ndarray:
    """Decode to one uint8 (B, size, size, 3) array; rejects other shapes."""
    out = np.empty((len(samples), size, size, 3), dtype=np.uint8)
    for i, s in enumerate(samples):
        try:
            with Image.open(s.path) as im:
                arr = np.asarray(im.convert("RGB"))
        except OSError as exc:
            raise TreeError(f"cannot decode {s.path}: {exc}") from None
        if arr.shape != (size, size, 3):
            raise TreeError(
                f"{s.path} is {arr.shape[1]}x{arr.shape[0]}, the backbone "
                f"expects {size}x{size}; resizing is not done implicitly")
        out[i] = arr
    return out
