"""Branch head architecture: forward pass, analytic gradients, cost counters.

A head turns one level's feature map (d,H,W) into N logits with exactly
K*(d+N) parameters:

  responses = conv1d_channels(featmap, kernels)        (K,H,W)
  mass[k]   = sum over positions of responses[k]^2     (K,)
  logits    = linear @ mass                            (N,)  no bias

The classification head reads the logits through a softmax, the confidence
head through an elementwise sigmoid. Gradients are hand-derived; there is no
autograd anywhere.

Numerics: squared responses are accumulated in 64-bit, sorted ascending first,
so the per-sample forward is bit-invariant under spatial permutation of the
input and cannot overflow for any finite float32 response. Cluster masses are
clamped at MASS_LIMIT (counted in the cache as ``saturated``); the backward
formulas ignore the clamp, which only engages on pathological inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import NumericsError, Rng, ShapeError, conv1d_channels, matvec, sigmoid, softmax

# Documented saturation bound for cluster masses. Large enough to never matter
# for unit-scale data, small enough that the float32 cast stays finite.
MASS_LIMIT = 1e20


@dataclass(frozen=True, eq=False)
class HeadParams:
    """K prototype kernels (K,d) plus a bias-free logit map (N,K)."""

    kernels: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        if self.kernels.ndim != 2 or self.linear.ndim != 2:
            raise ShapeError(
                f"kernels must be (K,d) and linear (N,K), got "
                f"{self.kernels.shape} and {self.linear.shape}")
        if self.linear.shape[1] != self.kernels.shape[0]:
            raise ShapeError(
                f"linear width {self.linear.shape[1]} != kernel count {self.kernels.shape[0]}")

    @property
    def k(self) -> int:
        return int(self.kernels.shape[0])

    @property
    def d(self) -> int:
        return int(self.kernels.shape[1])

    @property
    def n(self) -> int:
        return int(self.linear.shape[0])

    @property
    def param_count(self) -> int:
        return head_param_count(self.k, self.d, self.n)


@dataclass(frozen=True, eq=False)
class BranchHeads:
    """The classification + confidence head pair attached at one level."""

    level: int
    classification: HeadParams
    confidence: HeadParams

    def __post_init__(self):
        a, b = self.classification, self.confidence
        if (a.k, a.d, a.n) != (b.k, b.d, b.n):
            raise ShapeError(
                f"head pair dimensions differ: {(a.k, a.d, a.n)} vs {(b.k, b.d, b.n)}")
        if self.level < 1:
            raise ValueError(f"level must be >= 1, got {self.level}")


@dataclass(eq=False)
class ForwardCache:
    """Intermediates of one head forward, as consumed by head_backward."""

    responses: np.ndarray  # (K,H,W) pre-square
    mass: np.ndarray       # (K,) post-clamp
    logits: np.ndarray     # (N,)
    saturated: int = 0


@dataclass(eq=False)
class HeadGrads:
    kernels: np.ndarray
    linear: np.ndarray


@dataclass(eq=False)
class BatchCache:
    responses: np.ndarray  # (B,K,P)
    mass: np.ndarray       # (B,K)
    logits: np.ndarray     # (B,N)
    saturated: int = 0


def init_head(k: int, d: int, n: int, rng: Rng) -> HeadParams:
    """Fresh head: kernels ~ N(0, 1/d), linear ~ N(0, 1/K), i.i.d."""
    if min(k, d, n) < 1:
        raise ValueError(f"head dims must be >= 1, got K={k} d={d} N={n}")
    kernels = rng.normal((k, d), std=1.0 / np.sqrt(d))
    linear = rng.normal((n, k), std=1.0 / np.sqrt(k))
    return HeadParams(kernels=kernels, linear=linear)


def _mass_from_responses(responses: np.ndarray) -> tuple[np.ndarray, int]:
    """Sorted 64-bit square-sum per channel, clamped at MASS_LIMIT."""
    k = responses.shape[0]
    sq = responses.reshape(k, -1).astype(np.float64)
    sq *= sq
    sq.sort(axis=1)
    mass = sq.sum(axis=1)
    saturated = int(np.count_nonzero(mass > MASS_LIMIT))
    if saturated:
        mass = np.minimum(mass, MASS_LIMIT)
    return mass.astype(responses.dtype), saturated


def head_logits(params: HeadParams, featmap: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward one sample through a head; returns logits and the cache."""
    responses = conv1d_channels(featmap, params.kernels)
    mass, saturated = _mass_from_responses(responses)
    logits = matvec(params.linear, mass)
    return logits, ForwardCache(responses=responses, mass=mass,
                                logits=logits, saturated=saturated)


def classify(params: HeadParams, featmap: np.ndarray) -> np.ndarray:
    """Class probabilities: softmax over the head logits."""
    logits, _ = head_logits(params, featmap)
    return softmax(logits)


def confidence_scores(params: HeadParams, featmap: np.ndarray) -> np.ndarray:
    """Per-class exit-worthiness estimates: elementwise sigmoid of the logits."""
    logits, _ = head_logits(params, featmap)
    return sigmoid(logits)


def ce_loss_and_grad(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against ``target``.

    Returns (loss, dlogits) with dlogits = softmax(logits) - onehot(target),
    which always sums to zero.
    """
    n = logits.shape[0]
    if not 0 <= target < n:
        raise ValueError(f"target {target} out of range [0, {n})")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericsError("ce_loss_and_grad: non-finite logits")
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    loss = float(lse - z[target])
    p = np.exp(z - lse)
    p[target] -= 1.0
    return loss, p.astype(logits.dtype)


def _softplus(z: float) -> float:
    return max(z, 0.0) + np.log1p(np.exp(-abs(z)))


def bce_predicted_loss_and_grad(conf_logits: np.ndarray, predicted: int,
                                correct) -> tuple[float, np.ndarray]:
    """Binary cross-entropy on the predicted-class unit only.

    loss = BCE(sigmoid(conf_logits[predicted]), correct); the gradient is zero
    except at ``predicted`` where it is sigmoid(z) - correct.
    """
    n = conf_logits.shape[0]
    if not 0 <= predicted < n:
        raise ValueError(f"predicted class {predicted} out of range [0, {n})")
    y = float(bool(correct))
    z = float(conf_logits[predicted])
    if not np.isfinite(z):
        raise NumericsError("bce_predicted_loss_and_grad: non-finite logit")
    loss = _softplus(z) - y * z
    sig = 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))
    dlogits = np.zeros_like(conf_logits)
    dlogits[predicted] = np.asarray(sig - y, dtype=conf_logits.dtype)
    return float(loss), dlogits


def head_backward(params: HeadParams, featmap: np.ndarray, cache: ForwardCache,
                  dlogits: np.ndarray) -> HeadGrads:
    """Chain rule through logits = linear @ sum(conv(featmap)^2).

    dLinear[n,k]   = dlogits[n] * mass[k]
    dMass[k]       = sum_n linear[n,k] * dlogits[n]
    dKernels[k,c]  = dMass[k] * sum_hw 2 * responses[k,h,w] * featmap[c,h,w]
    """
    if dlogits.shape != (params.n,):
        raise ShapeError(f"dlogits shape {dlogits.shape} != ({params.n},)")
    if cache.responses.shape[0] != params.k:
        raise ShapeError("cache does not match params (kernel count differs)")
    d, h, w = featmap.shape
    if cache.responses.shape[1:] != (h, w) or d != params.d:
        raise ShapeError("cache does not match featmap shape")
    dlinear = np.outer(dlogits, cache.mass)
    dmass = params.linear.T @ dlogits
    resp_flat = cache.responses.reshape(params.k, h * w)
    x_flat = featmap.reshape(d, h * w)
    dkernels = 2.0 * dmass[:, None] * (resp_flat @ x_flat.T)
    return HeadGrads(kernels=dkernels.astype(params.kernels.dtype),
                     linear=dlinear.astype(params.linear.dtype))


def head_param_count(k: int, d: int, n: int) -> int:
    """Exact trainable parameter count of one head: K * (d + N)."""
    if min(k, d, n) < 0:
        raise ValueError("dimensions must be nonnegative")
    return k * (d + n)


def head_flops(k: int, d: int, h: int, w: int, n: int) -> int:
    """FLOPs of one head forward: conv MACs at 2 FLOPs each, plus the square,
    the spatial sum, and the linear map. Activations excluded."""
    if min(k, d, h, w, n) < 0:
        raise ValueError("dimensions must be nonnegative")
    p = h * w
    return 2 * k * d * p + k * p + k * (p - 1) + 2 * k * n


# ---------------------------------------------------------------------------
# batched paths (trainer internals; per-sample ops above are the reference)


def forward_batch(params: HeadParams, feats: np.ndarray) -> tuple[np.ndarray, BatchCache]:
    """Forward (B,d,H,W) through a head: (B,N) logits plus batch cache."""
    b, d, h, w = feats.shape
    if d != params.d:
        raise ShapeError(f"batch channel depth {d} != head depth {params.d}")
    xf = feats.reshape(b, d, h * w)
    responses = np.matmul(params.kernels, xf)  # (B,K,P)
    r64 = responses.astype(np.float64)
    mass = (r64 * r64).sum(axis=2)
    saturated = int(np.count_nonzero(mass > MASS_LIMIT))
    if saturated:
        mass = np.minimum(mass, MASS_LIMIT)
    mass = mass.astype(feats.dtype)
    logits = mass @ params.linear.T
    return logits, BatchCache(responses=responses, mass=mass,
                              logits=logits, saturated=saturated)


def backward_batch(params: HeadParams, feats: np.ndarray, cache: BatchCache,
                   dlogits: np.ndarray) -> HeadGrads:
    """Gradients summed over the batch (caller scales to a mean)."""
    b, d, h, w = feats.shape
    xf = feats.reshape(b, d, h * w)
    dlinear = dlogits.T @ cache.mass
    dmass = dlogits @ params.linear  # (B,K)
    dresp = 2.0 * cache.responses * dmass[:, :, None]
    dkernels = np.tensordot(dresp, xf, axes=([0, 2], [0, 2]))
    return HeadGrads(kernels=dkernels.astype(params.kernels.dtype),
                     linear=dlinear.astype(params.linear.dtype))


def ce_batch(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over a batch; dlogits rows are per-sample softmax - onehot."""
    z = logits.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = zmax[:, 0] + np.log(ez.sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(lse - z[rows, targets]))
    p = ez / ez.sum(axis=1, keepdims=True)
    p[rows, targets] -= 1.0
    return loss, p.astype(logits.dtype)


def bce_batch(logits: np.ndarray, units: np.ndarray,
              targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean predicted-class BCE over a batch; dlogits nonzero only at units."""
    rows = np.arange(logits.shape[0])
    z = logits[rows, units].astype(np.float64)
    y = targets.astype(np.float64)
    loss = float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - y * z))
    sig = np.empty_like(z)
    pos = z >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    sig[~pos] = ez / (1.0 + ez)
    dlogits = np.zeros_like(logits)
    dlogits[rows, units] = (sig - y).astype(logits.dtype)
    return loss, dlogits
