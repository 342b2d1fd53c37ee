"""Branch-by-branch orchestration and the persisted model bundle.

Two training schemes share one loop:

  boosted      each branch trains and calibrates only on the samples that
               survived every upstream exit; after a branch is calibrated, the
               strict exit rule filters both the train and validation views
               before the next branch sees them
  non-boosted  every branch trains on the full train split and calibrates on
               the full validation split; nothing is ever filtered

The test split never enters this module: the pipeline only receives train and
validation datasets. Per-branch RNG seeds derive from (root seed, level, head
role), so the two schemes start from identical initialization noise and differ
only in the data each branch sees.

A bundle directory holds one JSON manifest plus one weight blob per trained
head (magic "EXFGWGT0", float32 little-endian, kernels then linear, row-major).
Disabled thresholds serialize as null.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .branch_heads import BranchHeads, HeadParams
from .calibration import (
    DISABLED,
    PrecisionTable,
    backbone_class_precision,
    branch_scores,
    calibrate_branch,
)
from .dataset_store import (
    FormatError,
    SampleMask,
    ValidationError,
    apply_mask,
)
from .trainer import (
    TrainConfig,
    TrainReport,
    train_classification_head,
    train_confidence_head,
    view_too_small,
)

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
WEIGHT_MAGIC = b"EXFGWGT0"


@dataclass
class PipelineConfig:
    k: object = 32              # int, or one int per branch level
    margin: float = 0.0
    label_mode: str = "absolute"
    boosted: bool = True
    seed: int = 42
    train: TrainConfig = field(default_factory=TrainConfig)
    max_levels: int | None = None
    extra_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not -1.0 < self.margin <= 1.0:
            raise ValidationError(f"margin must be in (-1, 1], got {self.margin}")
        ks = self.k if isinstance(self.k, (list, tuple)) else [self.k]
        for k in ks:
            if int(k) < 1:
                raise ValidationError(f"k must be >= 1, got {k}")
        if self.max_levels is not None and self.max_levels < 1:
            raise ValidationError("max_levels must be >= 1 when set")

    def k_for(self, branch_index: int) -> int:
        if isinstance(self.k, (list, tuple)):
            if branch_index >= len(self.k):
                return int(self.k[-1])
            return int(self.k[branch_index])
        return int(self.k)


@dataclass
class BranchRecord:
    level: int
    k: int
    d: int
    h: int
    w: int
    trained: bool
    heads: BranchHeads | None
    thresholds: list
    class_report: TrainReport | None = None
    conf_report: TrainReport | None = None


@dataclass
class ModelBundle:
    branches: list
    precision: PrecisionTable
    margin: float
    label_mode: str
    boosted: bool
    num_classes: int
    dataset_fingerprint: str
    config: dict = field(default_factory=dict)


def derive_seed(root_seed: int, level: int, role: int) -> int:
    """Stable per-(branch, head-role) training seed from the root seed."""
    seq = np.random.SeedSequence(root_seed, spawn_key=(level, role))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)


def dataset_fingerprint(*datasets) -> str:
    """Content hash of the identity of the given splits: sample counts, level
    geometry, labels, and backbone predictions (feature payloads excluded for
    speed)."""
    h = hashlib.sha256()
    for ds in datasets:
        h.update(int(ds.num_samples).to_bytes(8, "little"))
        h.update(int(ds.num_classes).to_bytes(8, "little"))
        for meta in ds.levels:
            for v in (meta.level, meta.d, meta.h, meta.w, meta.cumulative_flops):
                h.update(int(v).to_bytes(8, "little"))
        h.update(int(ds.final_classifier_flops).to_bytes(8, "little"))
        h.update(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())
        h.update(np.ascontiguousarray(ds.backbone_pred, dtype="<u2").tobytes())
    return h.hexdigest()


def filter_survivors(heads: BranchHeads, thresholds: list, view) -> SampleMask:
    """Local indices of samples where no exit fires (confidence <= threshold,
    or the predicted class is DISABLED). Label-free by construction."""
    preds, confs = branch_scores(heads, view)
    keep = []
    for pos in range(len(preds)):
        t = thresholds[preds[pos]]
        exits = t is not DISABLED and confs[pos] > t
        if not exits:
            keep.append(pos)
    return SampleMask(np.asarray(keep, dtype=np.int64))


def _disabled_branch(level: int, k: int, meta, n_classes: int) -> BranchRecord:
    return BranchRecord(level=level, k=k, d=meta.d, h=meta.h, w=meta.w,
                        trained=False, heads=None,
                        thresholds=[DISABLED] * n_classes)


def _provenance(cfg: PipelineConfig) -> dict:
    train = cfg.train
    out = {
        "k": list(cfg.k) if isinstance(cfg.k, (list, tuple)) else int(cfg.k),
        "margin": cfg.margin,
        "label_mode": cfg.label_mode,
        "boosted": cfg.boosted,
        "seed": cfg.seed,
        "max_levels": cfg.max_levels,
        "train": {
            "epochs": train.epochs,
            "batch_size": train.batch_size,
            "lr": train.lr,
            "optimizer": train.optimizer,
            "momentum": train.momentum,
            "label_mode": train.label_mode,
            "allow_tiny": train.allow_tiny,
            "grad_clip": train.grad_clip,
        },
    }
    out.update(cfg.extra_config)
    return out


def run_pipeline(cfg: PipelineConfig, train_ds, val_ds) -> ModelBundle:
    """Train + calibrate every branch level per the configured scheme."""
    if cfg.boosted:
        return run_boosted(cfg, train_ds, val_ds)
    return run_nonboosted(cfg, train_ds, val_ds)


def _run(cfg: PipelineConfig, train_ds, val_ds, filtered: bool) -> ModelBundle:
    if train_ds.num_classes != val_ds.num_classes:
        raise ValidationError("train and validation class counts differ")
    t_geo = [(m.level, m.d, m.h, m.w) for m in train_ds.levels]
    v_geo = [(m.level, m.d, m.h, m.w) for m in val_ds.levels]
    if t_geo != v_geo:
        raise ValidationError(
            f"train and validation level geometry differ: {t_geo} vs {v_geo}")
    levels = [m.level for m in train_ds.levels]
    if cfg.max_levels is not None:
        levels = levels[:cfg.max_levels]
    n_classes = train_ds.num_classes
    precision_table = backbone_class_precision(val_ds)
    fingerprint = dataset_fingerprint(train_ds, val_ds)
    train_view = apply_mask(train_ds, SampleMask.full(train_ds.num_samples))
    val_view = apply_mask(val_ds, SampleMask.full(val_ds.num_samples))
    branches: list[BranchRecord] = []
    guard_tripped = False
    for branch_index, level in enumerate(levels):
        k = cfg.k_for(branch_index)
        meta = train_ds.level_meta(level)
        if guard_tripped or view_too_small(train_view.num_samples, cfg.train):
            if not guard_tripped:
                log.warning(
                    "branch %d: train view has %d samples, below the guard; "
                    "this and later branches are disabled",
                    level, train_view.num_samples)
            guard_tripped = True
            branches.append(_disabled_branch(level, k, meta, n_classes))
            continue
        class_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, level, 0),
                            label_mode=cfg.label_mode)
        clf, class_report = train_classification_head(train_view, level, k, class_cfg)
        conf_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, level, 1),
                           label_mode=cfg.label_mode)
        conf, conf_report = train_confidence_head(train_view, level, clf, k, conf_cfg)
        heads = BranchHeads(level=level, classification=clf, confidence=conf)
        thresholds = calibrate_branch(heads, val_view, precision_table,
                                      cfg.margin, cfg.label_mode)
        branches.append(BranchRecord(
            level=level, k=k, d=meta.d, h=meta.h, w=meta.w, trained=True,
            heads=heads, thresholds=thresholds,
            class_report=class_report, conf_report=conf_report))
        if filtered and branch_index + 1 < len(levels):
            train_view = apply_mask(
                train_view, filter_survivors(heads, thresholds, train_view))
            val_view = apply_mask(
                val_view, filter_survivors(heads, thresholds, val_view))
            log.info("after branch %d: %d train / %d validation survivors",
                     level, train_view.num_samples, val_view.num_samples)
    return ModelBundle(
        branches=branches, precision=precision_table, margin=cfg.margin,
        label_mode=cfg.label_mode, boosted=cfg.boosted, num_classes=n_classes,
        dataset_fingerprint=fingerprint, config=_provenance(cfg))


def run_boosted(cfg: PipelineConfig, train_ds, val_ds) -> ModelBundle:
    """Sequential scheme: downstream branches see only surviving samples."""
    cfg = replace(cfg, boosted=True)
    return _run(cfg, train_ds, val_ds, filtered=True)


def run_nonboosted(cfg: PipelineConfig, train_ds, val_ds) -> ModelBundle:
    """Full-data scheme: no filtering anywhere; a covariance-shift baseline."""
    cfg = replace(cfg, boosted=False)
    return _run(cfg, train_ds, val_ds, filtered=False)


def recalibrate(bundle: ModelBundle, cfg: PipelineConfig, val_ds) -> ModelBundle:
    """New thresholds for existing heads at a new margin, full-validation
    calibration. Only valid for non-boosted bundles: boosted calibration views
    depend on the margin through upstream filtering, so a boosted bundle needs
    a fresh run instead."""
    if bundle.boosted:
        raise ValidationError(
            "cannot recalibrate a boosted bundle: its calibration views depend "
            "on the margin; re-run the boosted pipeline at the new margin")
    precision_table = backbone_class_precision(val_ds)
    val_view = apply_mask(val_ds, SampleMask.full(val_ds.num_samples))
    branches = []
    for rec in bundle.branches:
        if not rec.trained:
            branches.append(replace(rec, thresholds=[DISABLED] * bundle.num_classes))
            continue
        thresholds = calibrate_branch(rec.heads, val_view, precision_table,
                                      cfg.margin, bundle.label_mode)
        branches.append(replace(rec, thresholds=thresholds))
    config = dict(bundle.config)
    config["margin"] = cfg.margin
    config["recalibration_validation_fingerprint"] = dataset_fingerprint(val_ds)
    config.update(cfg.extra_config)
    return ModelBundle(
        branches=branches, precision=precision_table, margin=cfg.margin,
        label_mode=bundle.label_mode, boosted=False,
        num_classes=bundle.num_classes,
        dataset_fingerprint=bundle.dataset_fingerprint,
        config=config)


# ---------------------------------------------------------------------------
# bundle persistence


def _write_head_blob(path: str, params: HeadParams):
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(np.ascontiguousarray(params.kernels, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(params.linear, dtype="<f4").tobytes())


def _read_head_blob(path: str, k: int, d: int, n: int) -> HeadParams:
    if not os.path.exists(path):
        raise FormatError(f"missing weight blob: {path}")
    expect = len(WEIGHT_MAGIC) + 4 * (k * d + n * k)
    actual = os.path.getsize(path)
    if actual != expect:
        raise FormatError(f"weight blob {path} has {actual} bytes, expected {expect}")
    with open(path, "rb") as fh:
        magic = fh.read(len(WEIGHT_MAGIC))
        if magic != WEIGHT_MAGIC:
            raise FormatError(f"bad magic in {path}: {magic!r} != {WEIGHT_MAGIC!r}")
        kern = np.frombuffer(fh.read(4 * k * d), dtype="<f4").reshape(k, d).copy()
        lin = np.frombuffer(fh.read(4 * n * k), dtype="<f4").reshape(n, k).copy()
    return HeadParams(kernels=kern, linear=lin)


def save_bundle(bundle: ModelBundle, path: str):
    os.makedirs(path, exist_ok=True)
    branch_entries = []
    for rec in bundle.branches:
        entry = {
            "level": rec.level, "k": rec.k, "d": rec.d, "h": rec.h, "w": rec.w,
            "trained": rec.trained,
            "thresholds": [None if t is DISABLED else float(t)
                           for t in rec.thresholds],
        }
        if rec.trained:
            entry["class_blob"] = f"b{rec.level}_class.w"
            entry["conf_blob"] = f"b{rec.level}_conf.w"
            _write_head_blob(os.path.join(path, entry["class_blob"]),
                             rec.heads.classification)
            _write_head_blob(os.path.join(path, entry["conf_blob"]),
                             rec.heads.confidence)
        branch_entries.append(entry)
    manifest = {
        "format_version": BUNDLE_VERSION,
        "kind": "early-exit-model-bundle",
        "num_classes": bundle.num_classes,
        "margin": bundle.margin,
        "label_mode": bundle.label_mode,
        "boosted": bundle.boosted,
        "dataset_fingerprint": bundle.dataset_fingerprint,
        "config": bundle.config,
        "precision": {"precision": bundle.precision.precision,
                      "support": bundle.precision.support},
        "branches": branch_entries,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_bundle(path: str) -> ModelBundle:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FormatError(f"missing bundle manifest: {mpath}")
    with open(mpath, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"unparseable bundle manifest {mpath}: {exc}") from exc
    if int(manifest.get("format_version", -1)) != BUNDLE_VERSION:
        raise FormatError(
            f"bundle {mpath}: unsupported version {manifest.get('format_version')}")
    n_classes = int(manifest["num_classes"])
    branches = []
    for entry in manifest["branches"]:
        thresholds = [None if t is None else float(t) for t in entry["thresholds"]]
        if len(thresholds) != n_classes:
            raise FormatError(
                f"bundle {mpath}: branch {entry['level']} has {len(thresholds)} "
                f"thresholds for {n_classes} classes")
        heads = None
        if entry["trained"]:
            k, d = int(entry["k"]), int(entry["d"])
            clf = _read_head_blob(os.path.join(path, entry["class_blob"]),
                                  k, d, n_classes)
            conf = _read_head_blob(os.path.join(path, entry["conf_blob"]),
                                   k, d, n_classes)
            heads = BranchHeads(level=int(entry["level"]),
                                classification=clf, confidence=conf)
        branches.append(BranchRecord(
            level=int(entry["level"]), k=int(entry["k"]), d=int(entry["d"]),
            h=int(entry["h"]), w=int(entry["w"]), trained=bool(entry["trained"]),
            heads=heads, thresholds=thresholds))
    precision = PrecisionTable(
        precision=[None if p is None else float(p)
                   for p in manifest["precision"]["precision"]],
        support=[int(s) for s in manifest["precision"]["support"]])
    return ModelBundle(
        branches=branches, precision=precision,
        margin=float(manifest["margin"]),
        label_mode=str(manifest["label_mode"]),
        boosted=bool(manifest["boosted"]),
        num_classes=n_classes,
        dataset_fingerprint=str(manifest["dataset_fingerprint"]),
        config=dict(manifest.get("config", {})))
