"""Minibatch training loops for the two heads of one branch level.

Both loops are plain SGD (optionally with momentum) over the batched forward/
backward paths in branch_heads. Shuffling is a seeded permutation per epoch, so
a (seed, view, config) triple fully determines the resulting parameters, bit
for bit. Labels come from the dataset's ground truth ("absolute" mode) or from
the frozen backbone's argmax ("distillation" mode).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .branch_heads import (
    HeadParams,
    backward_batch,
    bce_batch,
    ce_batch,
    forward_batch,
    init_head,
)
from .dataset_store import ValidationError
from .tensor_core import NumericsError, Rng

log = logging.getLogger(__name__)

LABEL_MODES = ("absolute", "distillation")
OPTIMIZERS = ("sgd", "momentum")

_CHUNK = 2048  # forward-only evaluation chunk


class TrainingError(RuntimeError):
    """A training precondition failed (empty or undersized view)."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.01
    optimizer: str = "momentum"
    momentum: float = 0.9
    seed: int = 0
    label_mode: str = "absolute"
    allow_tiny: bool = False
    # The squared-response architecture can blow up under momentum SGD (logit
    # gradients scale with cluster masses, which grow quadratically in the
    # kernels), so batch gradients are clipped to this global L2 norm. None
    # disables clipping.
    grad_clip: float | None = 5.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValidationError(f"grad_clip must be > 0 or None, got {self.grad_clip}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.label_mode not in LABEL_MODES:
            raise ValidationError(f"label_mode must be one of {LABEL_MODES}")


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    final_accuracy: float = 0.0
    num_samples: int = 0
    saturated: int = 0


def resolve_label(label: int, backbone_pred: int, mode: str) -> int:
    """Training target for one sample: ground truth or backbone argmax."""
    if mode == "absolute":
        return int(label)
    if mode == "distillation":
        return int(backbone_pred)
    raise ValidationError(f"unknown label mode {mode!r}")


def resolve_labels(view, mode: str) -> np.ndarray:
    if mode == "absolute":
        return view.labels.astype(np.int64)
    if mode == "distillation":
        preds = view.backbone_pred
        if preds is None:
            raise ValidationError("distillation mode needs backbone predictions")
        return preds.astype(np.int64)
    raise ValidationError(f"unknown label mode {mode!r}")


def view_too_small(n: int, cfg: TrainConfig) -> bool:
    """True when a view of n samples would trip the training guard."""
    if n == 0:
        return True
    return n < 2 * cfg.batch_size and not cfg.allow_tiny


def _guard_view(n: int, cfg: TrainConfig) -> int:
    """Returns the effective batch size, or raises on undersized views."""
    if n == 0:
        raise TrainingError("no surviving samples to train on")
    if n < 2 * cfg.batch_size:
        if not cfg.allow_tiny:
            raise TrainingError(
                f"view has {n} samples, below the 2*batch_size={2 * cfg.batch_size} "
                "guard; shrink the batch or enable allow_tiny for full-batch training")
        return min(cfg.batch_size, n)
    return cfg.batch_size


def _chunked_logits(params: HeadParams, feats: np.ndarray) -> np.ndarray:
    outs = []
    for start in range(0, feats.shape[0], _CHUNK):
        logits, _ = forward_batch(params, feats[start:start + _CHUNK])
        outs.append(logits)
    return np.concatenate(outs) if outs else np.zeros((0, params.n), dtype=feats.dtype)


def _run_epochs(params: HeadParams, feats: np.ndarray, cfg: TrainConfig,
                batch: int, loss_grad_fn) -> tuple[HeadParams, list, int]:
    """The shared update loop; loss_grad_fn(logits, idx) -> (mean loss, dlogits)."""
    kernels = params.kernels.copy()
    linear = params.linear.copy()
    vel_k = np.zeros_like(kernels)
    vel_l = np.zeros_like(linear)
    shuffle = Rng(cfg.seed).spawn(1)
    n = feats.shape[0]
    losses = []
    saturated = 0
    for _ in range(cfg.epochs):
        perm = shuffle.permutation(n)
        total = 0.0
        live = HeadParams(kernels=kernels, linear=linear)
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            bf = feats[idx]
            logits, cache = forward_batch(live, bf)
            if not np.all(np.isfinite(logits)):
                raise NumericsError("training forward produced non-finite logits")
            saturated += cache.saturated
            loss, dlogits = loss_grad_fn(logits, idx)
            grads = backward_batch(live, bf, cache, dlogits)
            inv = 1.0 / idx.shape[0]
            gk = grads.kernels * inv
            gl = grads.linear * inv
            if cfg.grad_clip is not None:
                sq = float((gk.astype(np.float64) ** 2).sum()
                           + (gl.astype(np.float64) ** 2).sum())
                if sq > cfg.grad_clip ** 2:
                    scale_down = np.float32(cfg.grad_clip / np.sqrt(sq))
                    gk = gk * scale_down
                    gl = gl * scale_down
            if cfg.optimizer == "momentum":
                vel_k = cfg.momentum * vel_k + gk
                vel_l = cfg.momentum * vel_l + gl
                kernels -= cfg.lr * vel_k
                linear -= cfg.lr * vel_l
            else:
                kernels -= cfg.lr * gk
                linear -= cfg.lr * gl
            live = HeadParams(kernels=kernels, linear=linear)
            total += loss * idx.shape[0]
        losses.append(total / n)
    return HeadParams(kernels=kernels, linear=linear), losses, saturated


def train_classification_head(view, level: int, k: int,
                              cfg: TrainConfig) -> tuple[HeadParams, TrainReport]:
    """Minibatch cross-entropy training of a fresh classification head."""
    batch = _guard_view(view.num_samples, cfg)
    feats = view.level_features(level)
    targets = resolve_labels(view, cfg.label_mode)
    params = init_head(k, feats.shape[1], view.num_classes, Rng(cfg.seed).spawn(0, 0))

    def loss_grad(logits, idx):
        return ce_batch(logits, targets[idx])

    trained, losses, saturated = _run_epochs(params, feats, cfg, batch, loss_grad)
    final = _chunked_logits(trained, feats)
    acc = float(np.mean(np.argmax(final, axis=1) == targets))
    log.info("classification head level=%d k=%d n=%d final_acc=%.4f",
             level, k, view.num_samples, acc)
    return trained, TrainReport(epoch_losses=losses, final_accuracy=acc,
                                num_samples=view.num_samples, saturated=saturated)


def train_confidence_head(view, level: int, classifier: HeadParams, k: int,
                          cfg: TrainConfig) -> tuple[HeadParams, TrainReport]:
    """Trains a confidence head to predict the classifier's correctness.

    For each sample the trained classifier's argmax fixes the active unit; the
    binary target says whether that argmax matches the resolved label. Only the
    active unit's logit receives loss and gradient.
    """
    batch = _guard_view(view.num_samples, cfg)
    feats = view.level_features(level)
    resolved = resolve_labels(view, cfg.label_mode)
    units = np.argmax(_chunked_logits(classifier, feats), axis=1)
    bits = (units == resolved).astype(np.int64)
    params = init_head(k, feats.shape[1], view.num_classes, Rng(cfg.seed).spawn(0, 1))

    def loss_grad(logits, idx):
        return bce_batch(logits, units[idx], bits[idx])

    trained, losses, saturated = _run_epochs(params, feats, cfg, batch, loss_grad)
    final = _chunked_logits(trained, feats)
    agree = (final[np.arange(final.shape[0]), units] > 0) == bits.astype(bool)
    acc = float(np.mean(agree))
    log.info("confidence head level=%d k=%d n=%d target_rate=%.4f final_acc=%.4f",
             level, k, view.num_samples, float(np.mean(bits)), acc)
    return trained, TrainReport(epoch_losses=losses, final_accuracy=acc,
                                num_samples=view.num_samples, saturated=saturated)
