"""Export one split of an image tree as branch-training data.

Images are enumerated deterministically, optionally subset per class, pushed
through the frozen backbone in batches, and the activations after the first
three residual groups land on disk in the training package's dataset layout
together with the backbone logits, argmax predictions, ground-truth labels,
and per-group cumulative FLOPs.
"""

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import images, resnet
from .flops import backbone_costs, feature_shapes
from .store_writer import LevelEntry, write_split

TAPS = 3  # groups with an exported feature map; group 4 feeds only the tail


@dataclass
class ExportSpec:
    dataset: str
    root: str
    split: str
    weights: str
    out: str
    subset: float = 1.0
    store_logits: bool = True
    batch_size: int = 32
    extra_provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.subset <= 1.0:
            raise images.TreeError(
                f"subset fraction must be in (0, 1], got {self.subset}")
        if self.batch_size < 1:
            raise images.TreeError("batch_size must be >= 1")


def _file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_backbone(w: resnet.Weights, pixels: np.ndarray, batch_size: int):
    """Batched forward over uint8 pixels; returns (features list, logits).

    The batch partition is part of the contract: re-running with the same
    batch_size reproduces the stored logits bit for bit.
    """
    feats = [[] for _ in range(TAPS)]
    logits = []
    for start in range(0, pixels.shape[0], batch_size):
        x = resnet.normalize_images(pixels[start:start + batch_size], w)
        fs, lg = resnet.forward(w, x, taps=TAPS)
        for acc, f in zip(feats, fs):
            acc.append(f)
        logits.append(lg)
    return ([np.concatenate(acc, axis=0) for acc in feats],
            np.concatenate(logits, axis=0))


def export_split(spec: ExportSpec) -> dict:
    w = resnet.load_weights(spec.weights)
    all_samples, class_names = images.enumerate_split(spec.root, spec.split)
    if len(class_names) != w.num_classes:
        raise images.TreeError(
            f"tree has {len(class_names)} classes but the weight bundle "
            f"classifies {w.num_classes}")
    samples = images.subset_per_class(all_samples, spec.subset)
    pixels = images.load_images(samples, resnet.INPUT_SIZE)
    features, logits = run_backbone(w, pixels, spec.batch_size)

    shapes = feature_shapes(TAPS)
    for arr, (d, h, wd) in zip(features, shapes):
        if arr.shape[1:] != (d, h, wd):
            raise images.TreeError(
                f"feature shape drift: got {arr.shape[1:]}, "
                f"expected {(d, h, wd)}")

    costs = backbone_costs(w.num_classes)
    levels = [
        LevelEntry(level=l, d=d, h=h, w=wd,
                   cumulative_flops=costs.cumulative_through_group(l))
        for l, (d, h, wd) in enumerate(shapes, start=1)
    ]
    labels = np.asarray([s.label for s in samples], dtype=np.uint16)
    preds = np.argmax(logits, axis=1).astype(np.uint16)

    provenance = {
        "generator": "resnet18-export",
        "dataset": spec.dataset,
        "split": spec.split,
        "stem_variant": resnet.STEM_VARIANT,
        "weights_sha256": _file_sha256(spec.weights),
        "subset_fraction": spec.subset,
        "batch_size": spec.batch_size,
        "class_names": list(class_names),
        "normalization": {
            "mean": [float(v) for v in w["norm.mean"]],
            "std": [float(v) for v in w["norm.std"]],
        },
    }
    provenance.update(spec.extra_provenance)

    write_split(
        spec.out, levels, features, labels, preds,
        logits.astype(np.float32) if spec.store_logits else None,
        final_classifier_flops=costs.final_tail(TAPS),
        num_classes=w.num_classes, provenance=provenance)
    return {
        "num_samples": len(samples),
        "num_classes": w.num_classes,
        "levels": [(e.level, e.d, e.h, e.w) for e in levels],
        "out": spec.out,
    }
