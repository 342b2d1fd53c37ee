"""Writer for the branch-training dataset layout.

This is an independent implementation of the on-disk contract the training
package reads: a manifest.json plus one headered binary blob per table. The
training side is the authority on the format; its verify-dataset command is
the interop check. Layout per split directory:

    manifest.json          canonical JSON (sorted keys, indent 1, newline)
    level<l>.feat          8-byte magic, u32-le version, 4 reserved bytes,
                           then num_samples x (d*h*w) little-endian float32
    labels.u16             8-byte magic, then little-endian uint16
    backbone_pred.u16      same framing as labels
    backbone_logits.f32    optional; 8-byte magic, then little-endian
                           float32, num_samples x num_classes row-major
"""

import json
import os
from dataclasses import dataclass

import numpy as np

FEATURE_MAGIC = b"EXFGFMAP"
LABEL_MAGIC = b"EXFGLBL0"
LOGITS_MAGIC = b"EXFGLGT0"
FORMAT_VERSION = 1


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class LevelEntry:
    level: int
    d: int
    h: int
    w: int
    cumulative_flops: int


def write_split(path: str, levels: list, features: list, labels: np.ndarray,
                backbone_pred: np.ndarray, backbone_logits,
                final_classifier_flops: int, num_classes: int,
                provenance: dict):
    """Write one split directory; validates shapes and ranges first."""
    labels = np.asarray(labels)
    backbone_pred = np.asarray(backbone_pred)
    n = int(labels.shape[0])
    if backbone_pred.shape != (n,):
        raise StoreError(f"backbone_pred has shape {backbone_pred.shape}, "
                         f"expected ({n},)")
    if len(levels) != len(features):
        raise StoreError("levels and feature arrays differ in length")
    prev = 0
    for entry, arr in zip(levels, features):
        if arr.shape != (n, entry.d, entry.h, entry.w):
            raise StoreError(
                f"level {entry.level} features have shape {arr.shape}, "
                f"expected {(n, entry.d, entry.h, entry.w)}")
        if entry.cumulative_flops <= prev:
            raise StoreError("cumulative_flops must strictly increase")
        prev = entry.cumulative_flops
    if final_classifier_flops <= 0:
        raise StoreError("final_classifier_flops must be positive")
    for name, table in (("labels", labels), ("backbone_pred", backbone_pred)):
        if table.size and not (0 <= int(table.min())
                               and int(table.max()) < num_classes):
            raise StoreError(f"{name} outside [0, {num_classes})")
    if backbone_logits is not None:
        backbone_logits = np.asarray(backbone_logits)
        if backbone_logits.shape != (n, num_classes):
            raise StoreError(
                f"backbone_logits has shape {backbone_logits.shape}, "
                f"expected {(n, num_classes)}")

    os.makedirs(path, exist_ok=True)
    level_entries = []
    for entry, arr in zip(levels, features):
        blob = f"level{entry.level}.feat"
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        with open(os.path.join(path, blob), "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(FORMAT_VERSION.to_bytes(4, "little"))
            fh.write(b"\x00\x00\x00\x00")
            fh.write(payload)
        level_entries.append({
            "level": entry.level, "d": entry.d, "h": entry.h, "w": entry.w,
            "cumulative_flops": entry.cumulative_flops,
            "blob": blob, "blob_bytes": 16 + len(payload),
        })
    with open(os.path.join(path, "labels.u16"), "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())
    with open(os.path.join(path, "backbone_pred.u16"), "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(np.ascontiguousarray(backbone_pred, dtype="<u2").tobytes())
    logits_file = None
    if backbone_logits is not None:
        logits_file = "backbone_logits.f32"
        with open(os.path.join(path, logits_file), "wb") as fh:
            fh.write(LOGITS_MAGIC)
            fh.write(np.ascontiguousarray(backbone_logits,
                                          dtype="<f4").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "num_samples": n,
        "num_classes": num_classes,
        "levels": level_entries,
        "final_classifier_flops": final_classifier_flops,
        "labels_file": "labels.u16",
        "backbone_pred_file": "backbone_pred.u16",
        "backbone_logits_file": logits_file,
        "provenance": provenance,
    }
    with open(os.path.join(path, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
