"""On-disk dataset format, masked views, and the synthetic dataset generator.

A dataset directory holds one manifest (JSON) plus binary blobs: one feature
blob per exported backbone level, a label file, a backbone-prediction file, and
optionally a backbone-logits file. All blobs are little-endian with fixed
8-byte magics so a reader in any language can validate them cheaply:

  features  "EXFGFMAP" + u32 version + u32 reserved + n*(d*h*w) float32
  labels    "EXFGLBL0" + n uint16          (same magic for backbone preds)
  logits    "EXFGLGT0" + n*num_classes float32

Float payloads are row-major (channel, height, width) with samples contiguous
in index order. The synthetic generator fabricates a dataset triplet with a
controllable difficulty mix so the whole training/calibration/evaluation stack
runs without any real backbone export.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import Rng

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"EXFGFMAP"
LABEL_MAGIC = b"EXFGLBL0"
LOGITS_MAGIC = b"EXFGLGT0"
FORMAT_VERSION = 1

_HEADER_BYTES = 16  # feature blobs: magic + version + reserved


class FormatError(Exception):
    """Corrupt or mismatched on-disk data (bad magic, truncation, bad version)."""


class ValidationError(ValueError):
    """Well-formed input whose values violate a contract."""


@dataclass(frozen=True)
class LevelMeta:
    """Shape and cost metadata for one exported backbone level (1-based)."""

    level: int
    d: int
    h: int
    w: int
    cumulative_flops: int
    blob: str = ""
    blob_bytes: int = 0

    @property
    def sample_floats(self) -> int:
        return self.d * self.h * self.w


@dataclass(frozen=True)
class SampleMask:
    """Ordered selection of sample indices into a parent of known size.

    Indices are strictly increasing with no duplicates; an empty mask is valid.
    """

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if idx.ndim != 1:
            raise ValidationError("mask indices must be 1-D")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            raise ValidationError("mask indices must be strictly increasing and nonnegative")

    def __len__(self) -> int:
        return int(self.indices.size)

    @classmethod
    def full(cls, n: int) -> "SampleMask":
        return cls(np.arange(n, dtype=np.int64))

    def check_bound(self, n: int):
        if len(self) and int(self.indices[-1]) >= n:
            raise ValidationError(
                f"mask index {int(self.indices[-1])} out of range for {n} samples"
            )


@dataclass
class MemoryDataset:
    """A fully materialized dataset: features per level plus per-sample tables."""

    num_classes: int
    levels: list[LevelMeta]
    features: list[np.ndarray]  # one (n, d, h, w) float32 array per level
    labels: np.ndarray          # (n,) uint16
    backbone_pred: np.ndarray   # (n,) uint16
    final_classifier_flops: int
    backbone_logits: np.ndarray | None = None  # (n, num_classes) float32
    provenance: dict = field(default_factory=dict)
    tiers: np.ndarray | None = None  # synthetic difficulty tags, never serialized

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])

    def level_meta(self, level: int) -> LevelMeta:
        return _find_level(self.levels, level)

    def level_features(self, level: int) -> np.ndarray:
        meta = self.level_meta(level)
        return self.features[self.levels.index(meta)]


class StoredDataset:
    """Lazy reader over a dataset directory; feature arrays load on demand."""

    def __init__(self, path: str):
        self.path = path
        manifest = _read_manifest(path)
        self.num_classes = int(manifest["num_classes"])
        self._declared_samples = int(manifest["num_samples"])
        self.levels = [
            LevelMeta(
                level=int(lv["level"]), d=int(lv["d"]), h=int(lv["h"]), w=int(lv["w"]),
                cumulative_flops=int(lv["cumulative_flops"]),
                blob=str(lv["blob"]), blob_bytes=int(lv["blob_bytes"]),
            )
            for lv in manifest["levels"]
        ]
        self.final_classifier_flops = int(manifest["final_classifier_flops"])
        self.provenance = manifest.get("provenance", {}) or {}
        self._manifest = manifest
        self.labels = _read_u16(os.path.join(path, manifest["labels_file"]),
                                self._declared_samples)
        self.backbone_pred = _read_u16(os.path.join(path, manifest["backbone_pred_file"]),
                                       self._declared_samples)
        logits_file = manifest.get("backbone_logits_file")
        if logits_file:
            self.backbone_logits = _read_f32_table(
                os.path.join(path, logits_file), LOGITS_MAGIC, 8,
                self._declared_samples, self.num_classes)
        else:
            self.backbone_logits = None
        self._cache: dict[int, np.ndarray] = {}

    @property
    def num_samples(self) -> int:
        return self._declared_samples

    def level_meta(self, level: int) -> LevelMeta:
        return _find_level(self.levels, level)

    def level_features(self, level: int) -> np.ndarray:
        if level not in self._cache:
            meta = self.level_meta(level)
            n = self.num_samples
            blob_path = os.path.join(self.path, meta.blob)
            sample_bytes = meta.sample_floats * 4
            if not os.path.exists(blob_path):
                raise FormatError(f"missing blob file: {blob_path}")
            with open(blob_path, "rb") as fh:
                _check_magic(fh, FEATURE_MAGIC, blob_path)
                version = int.from_bytes(_read_exact(fh, 4, blob_path), "little")
                if version != FORMAT_VERSION:
                    raise FormatError(f"blob {blob_path}: unsupported version {version}")
                _read_exact(fh, 4, blob_path)
                buf = _read_exact(fh, n * sample_bytes, blob_path)
                if fh.read(1):
                    raise FormatError(f"trailing bytes in {blob_path}")
            self._cache[level] = np.frombuffer(buf, dtype="<f4").reshape(
                n, meta.d, meta.h, meta.w).copy()
        return self._cache[level]


@dataclass
class DatasetView:
    """A logical sub-dataset: a root dataset plus absolute retained indices."""

    base: object  # MemoryDataset | StoredDataset
    mask: SampleMask

    def __post_init__(self):
        self.mask.check_bound(self.base.num_samples)

    @property
    def num_samples(self) -> int:
        return len(self.mask)

    @property
    def num_classes(self) -> int:
        return self.base.num_classes

    @property
    def levels(self):
        return self.base.levels

    @property
    def final_classifier_flops(self) -> int:
        return self.base.final_classifier_flops

    @property
    def labels(self) -> np.ndarray:
        return self.base.labels[self.mask.indices]

    @property
    def backbone_pred(self) -> np.ndarray:
        return self.base.backbone_pred[self.mask.indices]

    @property
    def backbone_logits(self):
        bl = self.base.backbone_logits
        return None if bl is None else bl[self.mask.indices]

    def level_meta(self, level: int) -> LevelMeta:
        return self.base.level_meta(level)

    def level_features(self, level: int) -> np.ndarray:
        return self.base.level_features(level)[self.mask.indices]


def apply_mask(dataset, mask: SampleMask):
    """Sub-dataset view retaining ``mask``'s samples; masks on views compose."""
    if isinstance(dataset, DatasetView):
        mask.check_bound(dataset.num_samples)
        composed = SampleMask(dataset.mask.indices[mask.indices])
        return DatasetView(dataset.base, composed)
    mask.check_bound(dataset.num_samples)
    return DatasetView(dataset, mask)


def _find_level(levels, level: int) -> LevelMeta:
    for meta in levels:
        if meta.level == level:
            return meta
    raise ValidationError(f"level {level} not present (have {[m.level for m in levels]})")


# ---------------------------------------------------------------------------
# on-disk plumbing


def _read_manifest(path: str) -> dict:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FormatError(f"missing manifest: {mpath}")
    with open(mpath, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"unparseable manifest {mpath}: {exc}") from exc
    for key in ("format_version", "num_samples", "num_classes", "levels",
                "final_classifier_flops", "labels_file", "backbone_pred_file"):
        if key not in manifest:
            raise FormatError(f"manifest {mpath} missing key '{key}'")
    if int(manifest["format_version"]) != FORMAT_VERSION:
        raise FormatError(
            f"manifest {mpath}: unsupported format version {manifest['format_version']}")
    return manifest


def _read_exact(fh, count: int, path: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated blob {path}: wanted {count} bytes, got {len(buf)}")
    return buf


def _check_magic(fh, magic: bytes, path: str):
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic in {path}: {got!r} != {magic!r}")


def _read_u16(path: str, expect_n: int) -> np.ndarray:
    if not os.path.exists(path):
        raise FormatError(f"missing blob file: {path}")
    with open(path, "rb") as fh:
        _check_magic(fh, LABEL_MAGIC, path)
        buf = _read_exact(fh, expect_n * 2, path)
        if fh.read(1):
            raise FormatError(f"trailing bytes in {path}")
    return np.frombuffer(buf, dtype="<u2").copy()


def _read_f32_table(path: str, magic: bytes, header: int, n: int, width: int) -> np.ndarray:
    if not os.path.exists(path):
        raise FormatError(f"missing blob file: {path}")
    with open(path, "rb") as fh:
        _check_magic(fh, magic, path)
        if header > len(magic):
            _read_exact(fh, header - len(magic), path)
        buf = _read_exact(fh, n * width * 4, path)
        if fh.read(1):
            raise FormatError(f"trailing bytes in {path}")
    return np.frombuffer(buf, dtype="<f4").reshape(n, width).copy()


def stream_level(path: str, level: int, mask: SampleMask | None = None):
    """Yield (absolute index, (d,h,w) float32 featmap) for one level of a stored
    dataset, in mask order (natural order when mask is None). Holds one sample
    in memory at a time."""
    manifest = _read_manifest(path)
    n = int(manifest["num_samples"])
    meta = _find_level([
        LevelMeta(level=int(lv["level"]), d=int(lv["d"]), h=int(lv["h"]), w=int(lv["w"]),
                  cumulative_flops=int(lv["cumulative_flops"]),
                  blob=str(lv["blob"]), blob_bytes=int(lv["blob_bytes"]))
        for lv in manifest["levels"]
    ], level)
    if mask is None:
        mask = SampleMask.full(n)
    mask.check_bound(n)
    sample_bytes = meta.sample_floats * 4
    blob_path = os.path.join(path, meta.blob)
    if not os.path.exists(blob_path):
        raise FormatError(f"missing blob file: {blob_path}")
    expected = _HEADER_BYTES + n * sample_bytes
    actual = os.path.getsize(blob_path)
    if actual != expected:
        raise FormatError(
            f"blob {blob_path} has {actual} bytes, expected {expected}")
    with open(blob_path, "rb") as fh:
        _check_magic(fh, FEATURE_MAGIC, blob_path)
        version = int.from_bytes(_read_exact(fh, 4, blob_path), "little")
        if version != FORMAT_VERSION:
            raise FormatError(f"blob {blob_path}: unsupported version {version}")
        _read_exact(fh, 4, blob_path)  # reserved
        for idx in mask.indices:
            fh.seek(_HEADER_BYTES + int(idx) * sample_bytes)
            buf = _read_exact(fh, sample_bytes, blob_path)
            fm = np.frombuffer(buf, dtype="<f4").reshape(meta.d, meta.h, meta.w)
            yield int(idx), fm.copy()


def iter_samples(dataset, levels: list[int] | None = None):
    """Yield per-sample records (pos, {level: featmap}, label, backbone_pred,
    backbone_logits row or None) over a dataset or view, in order."""
    if levels is None:
        levels = [m.level for m in dataset.levels]
    per_level = [dataset.level_features(l) for l in levels]
    labels = dataset.labels
    preds = dataset.backbone_pred
    logits = dataset.backbone_logits
    for pos in range(dataset.num_samples):
        fmaps = {l: per_level[i][pos] for i, l in enumerate(levels)}
        row = None if logits is None else logits[pos]
        yield pos, fmaps, int(labels[pos]), int(preds[pos]), row


def _validate_memory_dataset(ds: MemoryDataset):
    n = ds.num_samples
    if ds.num_classes < 1:
        raise ValidationError("num_classes must be >= 1")
    if ds.num_classes > 0xFFFF:
        raise ValidationError("num_classes exceeds 16-bit label range")
    if len(ds.levels) != len(ds.features):
        raise ValidationError("levels metadata and feature arrays disagree in count")
    seen = set()
    prev_flops = 0
    for meta, arr in zip(ds.levels, ds.features):
        if meta.level in seen:
            raise ValidationError(f"duplicate level index {meta.level}")
        seen.add(meta.level)
        want = (n, meta.d, meta.h, meta.w)
        if tuple(arr.shape) != want:
            raise ValidationError(
                f"level {meta.level} features shape {arr.shape} != manifest {want}")
        if arr.dtype != np.float32:
            raise ValidationError(f"level {meta.level} features must be float32")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"level {meta.level} features contain non-finite values")
        if meta.cumulative_flops <= prev_flops:
            raise ValidationError("cumulative_flops must strictly increase with level")
        prev_flops = meta.cumulative_flops
    for name, table in (("labels", ds.labels), ("backbone_pred", ds.backbone_pred)):
        if table.shape != (n,):
            raise ValidationError(f"{name} shape {table.shape} != ({n},)")
        if table.size and int(table.max()) >= ds.num_classes:
            raise ValidationError(
                f"{name} contains class {int(table.max())} >= num_classes {ds.num_classes}")
    if ds.backbone_logits is not None:
        if ds.backbone_logits.shape != (n, ds.num_classes):
            raise ValidationError(
                f"backbone_logits shape {ds.backbone_logits.shape} != ({n}, {ds.num_classes})")


def write_dataset(ds: MemoryDataset, path: str):
    """Serialize a MemoryDataset into ``path`` (created if needed)."""
    _validate_memory_dataset(ds)
    os.makedirs(path, exist_ok=True)
    level_entries = []
    for meta, arr in zip(ds.levels, ds.features):
        blob = meta.blob or f"level{meta.level}.feat"
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        with open(os.path.join(path, blob), "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(FORMAT_VERSION.to_bytes(4, "little"))
            fh.write(b"\x00\x00\x00\x00")
            fh.write(payload)
        level_entries.append({
            "level": meta.level, "d": meta.d, "h": meta.h, "w": meta.w,
            "cumulative_flops": meta.cumulative_flops,
            "blob": blob, "blob_bytes": _HEADER_BYTES + len(payload),
        })
    with open(os.path.join(path, "labels.u16"), "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())
    with open(os.path.join(path, "backbone_pred.u16"), "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(np.ascontiguousarray(ds.backbone_pred, dtype="<u2").tobytes())
    logits_file = None
    if ds.backbone_logits is not None:
        logits_file = "backbone_logits.f32"
        with open(os.path.join(path, logits_file), "wb") as fh:
            fh.write(LOGITS_MAGIC)
            fh.write(np.ascontiguousarray(ds.backbone_logits, dtype="<f4").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "num_samples": ds.num_samples,
        "num_classes": ds.num_classes,
        "levels": level_entries,
        "final_classifier_flops": ds.final_classifier_flops,
        "labels_file": "labels.u16",
        "backbone_pred_file": "backbone_pred.u16",
        "backbone_logits_file": logits_file,
        "provenance": ds.provenance,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(path: str) -> StoredDataset:
    return StoredDataset(path)


def verify_dataset(path: str) -> dict:
    """Validate a stored dataset; raises FormatError / ValidationError naming
    the offending file. Returns a small summary dict on success."""
    ds = StoredDataset(path)
    n = ds.num_samples
    prev = 0
    for meta in ds.levels:
        blob_path = os.path.join(path, meta.blob)
        expected = _HEADER_BYTES + n * meta.sample_floats * 4
        if not os.path.exists(blob_path):
            raise FormatError(f"missing blob file: {blob_path}")
        actual = os.path.getsize(blob_path)
        if actual != expected:
            raise FormatError(f"blob {blob_path} has {actual} bytes, expected {expected}")
        if meta.blob_bytes != expected:
            raise FormatError(
                f"manifest blob_bytes {meta.blob_bytes} != actual {expected} for {blob_path}")
        with open(blob_path, "rb") as fh:
            _check_magic(fh, FEATURE_MAGIC, blob_path)
        if meta.cumulative_flops <= prev:
            raise ValidationError("cumulative_flops must strictly increase with level")
        prev = meta.cumulative_flops
    for table, name in ((ds.labels, "labels"), (ds.backbone_pred, "backbone_pred")):
        if table.size and int(table.max()) >= ds.num_classes:
            raise ValidationError(
                f"{name} contains class {int(table.max())} >= num_classes {ds.num_classes}")
    return {
        "num_samples": n,
        "num_classes": ds.num_classes,
        "levels": [dataclasses.asdict(m) for m in ds.levels],
        "has_logits": ds.backbone_logits is not None,
    }


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class LevelShape:
    d: int
    h: int
    w: int


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic dataset triplet.

    Samples carry a difficulty tier t in {1 .. L+1}: class signal is present in
    the feature maps of every level >= t and absent below, so tier-1 samples
    are decodable from the first level while tier-(L+1) samples are pure noise
    at every branch level. The backbone is simulated as a predictor with a
    fixed error rate, plus logits whose argmax matches its prediction.
    """

    num_classes: int = 10
    shapes: tuple = (LevelShape(16, 8, 8), LevelShape(32, 4, 4), LevelShape(64, 2, 2))
    tier_fractions: tuple = (0.4, 0.2, 0.1, 0.3)
    sizes: tuple = (5000, 2000, 2000)
    backbone_error_rate: float = 0.08
    cumulative_flops: tuple = (306_000_000, 570_000_000, 834_000_000)
    final_classifier_flops: int = 276_000_000
    signal_strength: float = 3.5
    store_logits: bool = True

    @property
    def num_levels(self) -> int:
        return len(self.shapes)

    def validate(self):
        L = self.num_levels
        if len(self.tier_fractions) != L + 1:
            raise ValidationError(
                f"need {L + 1} tier fractions for {L} levels, got {len(self.tier_fractions)}")
        if abs(sum(self.tier_fractions) - 1.0) > 1e-9:
            raise ValidationError("tier fractions must sum to 1")
        if any(f < 0 for f in self.tier_fractions):
            raise ValidationError("tier fractions must be nonnegative")
        if len(self.cumulative_flops) != L:
            raise ValidationError("need one cumulative FLOPs entry per level")
        if any(s.d < self.num_classes for s in self.shapes):
            raise ValidationError(
                "each level needs channel depth >= num_classes for orthogonal class signals")
        if not 0.0 <= self.backbone_error_rate < 1.0:
            raise ValidationError("backbone_error_rate must be in [0, 1)")


SYNTH_SPECS: dict[str, SynthSpec] = {
    "tiny": SynthSpec(),
    "micro": SynthSpec(
        shapes=(LevelShape(12, 4, 4), LevelShape(14, 2, 2), LevelShape(16, 2, 2)),
        tier_fractions=(0.4, 0.2, 0.1, 0.3),
        sizes=(900, 450, 450),
        cumulative_flops=(1_000_000, 2_000_000, 3_000_000),
        final_classifier_flops=1_500_000,
    ),
}


def _class_directions(spec: SynthSpec, root: Rng) -> list[np.ndarray]:
    """Per level: (num_classes, d) orthonormal rows, deterministic in the seed."""
    dirs = []
    for li, shape in enumerate(spec.shapes):
        raw = root.spawn(0, li).normal((shape.d, spec.num_classes), dtype=np.float64)
        q, _ = np.linalg.qr(raw)
        dirs.append(np.ascontiguousarray(q.T))  # (num_classes, d), unit rows
    return dirs


def _tier_array(spec: SynthSpec, n: int, rng: Rng) -> np.ndarray:
    counts = [int(np.floor(f * n)) for f in spec.tier_fractions]
    counts[-1] += n - sum(counts)  # remainder lands in the hardest tier
    tiers = np.concatenate([
        np.full(c, t + 1, dtype=np.int64) for t, c in enumerate(counts)
    ])
    return tiers[rng.permutation(n)]


def _generate_split(spec: SynthSpec, root: Rng, split_idx: int, n: int,
                    directions, provenance: dict) -> MemoryDataset:
    N = spec.num_classes
    sub = root.spawn(1 + split_idx)
    labels = sub.spawn(0).integers(0, N, n).astype(np.uint16)
    tiers = _tier_array(spec, n, sub.spawn(1))
    features = []
    levels = []
    for li, shape in enumerate(spec.shapes):
        noise = sub.spawn(2, li).normal((n, shape.d, shape.h, shape.w))
        active = tiers <= (li + 1)  # signal present at levels >= tier
        if np.any(active):
            means = directions[li][labels[active].astype(np.int64)]  # (m, d)
            bump = (spec.signal_strength * means).astype(np.float32)
            noise[active] += bump[:, :, None, None]
        features.append(noise)
        levels.append(LevelMeta(
            level=li + 1, d=shape.d, h=shape.h, w=shape.w,
            cumulative_flops=int(spec.cumulative_flops[li]),
            blob=f"level{li + 1}.feat",
        ))
    flip = sub.spawn(3).uniform((n,), dtype=np.float64) < spec.backbone_error_rate
    offsets = sub.spawn(4).integers(1, N, n) if N > 1 else np.zeros(n, dtype=np.int64)
    preds = labels.astype(np.int64).copy()
    preds[flip] = (preds[flip] + offsets[flip]) % N
    preds = preds.astype(np.uint16)
    logits = None
    if spec.store_logits:
        logits = sub.spawn(5).normal((n, N))
        gaps = 1.0 + sub.spawn(6).uniform((n,), dtype=np.float64).astype(np.float32)
        rowmax = logits.max(axis=1)
        logits[np.arange(n), preds.astype(np.int64)] = rowmax + gaps
    return MemoryDataset(
        num_classes=N, levels=levels, features=features, labels=labels,
        backbone_pred=preds, final_classifier_flops=int(spec.final_classifier_flops),
        backbone_logits=logits, provenance=dict(provenance), tiers=tiers,
    )


def synth_generate(spec: SynthSpec, seed: int):
    """Deterministic (train, validation, test) MemoryDataset triplet."""
    spec.validate()
    root = Rng(seed)
    directions = _class_directions(spec, root)
    base_prov = {
        "generator": "synthetic",
        "seed": int(seed),
        "tier_fractions": list(spec.tier_fractions),
        "backbone_error_rate": spec.backbone_error_rate,
        "signal_strength": spec.signal_strength,
    }
    out = []
    for split_idx, (split_name, n) in enumerate(
            zip(("train", "validation", "test"), spec.sizes)):
        prov = dict(base_prov)
        prov["split"] = split_name
        out.append(_generate_split(spec, root, split_idx, int(n), directions, prov))
    return tuple(out)
