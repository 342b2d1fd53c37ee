"""Numeric substrate for the branch heads: small dense ops plus a seedable RNG.

Everything here is a thin, shape-checked wrapper over numpy. The wrappers exist
to give the rest of the package a single place where dtype policy, finiteness
checking, and numerically stable activations live. Feature maps are float32 on
disk; a float64 path is kept working throughout so gradient checks can run the
same code at higher precision.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "NumericsError",
    "Rng",
    "conv1d_channels",
    "spatial_sum",
    "square",
    "scale",
    "add_scalar",
    "matvec",
    "softmax",
    "sigmoid",
]

# Open-interval clamp for activation outputs. Computed in float64, clipped, then
# cast back. The upper bound sits just above 1 - 2^-24 so the float32 cast cannot
# round to exactly 1.0; the lower bound keeps strict ">0" comparisons meaningful.
_ACT_LO = 1e-30
_ACT_HI = 1.0 - 6.2e-8

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when an operand's shape does not match the operation contract."""


class NumericsError(ArithmeticError):
    """Raised when an operation would produce or consume NaN/Inf."""


def _as_float(x, name: str) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype not in _FLOAT_DTYPES:
        a = a.astype(np.float32)
    return a


def _check_finite(a: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{op}: non-finite values encountered")
    return a


class Rng:
    """Counter-based random source (numpy Philox) with named substream spawning.

    A root seed plus a tuple key fully determine every draw, independent of
    platform and call interleaving across distinct keys. Substreams for, say,
    (branch 2, confidence head) are spawned as ``root.spawn(2, 1)`` and never
    collide with any other key path.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise TypeError("seed must be an int")
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def spawn(self, *key: int) -> "Rng":
        """Independent substream named by appending ``key`` to this one's key."""
        return Rng(self.seed, self.key + tuple(key))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        if len(shape) == 0:
            raise ShapeError("normal: shape must be nonempty")
        draw = self._gen.standard_normal(size=shape, dtype=np.float64)
        return np.asarray(draw * std, dtype=dtype)

    def uniform(self, shape, dtype=np.float32) -> np.ndarray:
        return np.asarray(self._gen.random(size=shape, dtype=np.float64), dtype=dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_mask(self, n: int, count: int) -> np.ndarray:
        """Boolean mask with exactly ``count`` of ``n`` positions set."""
        idx = self._gen.choice(n, size=count, replace=False)
        mask = np.zeros(n, dtype=bool)
        mask[idx] = True
        return mask


def rng_normal(rng: Rng, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Functional alias for ``rng.normal``; kept for symmetry with the other ops."""
    return rng.normal(shape, std=std, dtype=dtype)


def conv1d_channels(featmap, kernels) -> np.ndarray:
    """1x1 convolution over channels: (d,H,W) features x (K,d) kernels -> (K,H,W).

    Each output position is the dot product of one kernel with the channel
    vector at that spatial position; positions never mix.
    """
    x = _as_float(featmap, "featmap")
    k = _as_float(kernels, "kernels")
    if x.ndim != 3:
        raise ShapeError(f"featmap must be (d,H,W), got shape {x.shape}")
    if k.ndim != 2:
        raise ShapeError(f"kernels must be (K,d), got shape {k.shape}")
    d, h, w = x.shape
    if k.shape[1] != d:
        raise ShapeError(f"kernel depth {k.shape[1]} != featmap channels {d}")
    out = k @ x.reshape(d, h * w)
    return _check_finite(out.reshape(k.shape[0], h, w), "conv1d_channels")


def square(t) -> np.ndarray:
    a = _as_float(t, "t")
    return _check_finite(a * a, "square")


def scale(t, factor: float) -> np.ndarray:
    a = _as_float(t, "t")
    return _check_finite(a * a.dtype.type(factor), "scale")


def add_scalar(t, offset: float) -> np.ndarray:
    a = _as_float(t, "t")
    return _check_finite(a + a.dtype.type(offset), "add_scalar")


def spatial_sum(t) -> np.ndarray:
    """Reduce (K,H,W) -> (K,) by summing each channel's spatial grid.

    Squared values are sorted ascending before accumulation (in float64), so the
    result depends only on the multiset of values per channel: permuting spatial
    positions leaves the output bit-identical.
    """
    a = _as_float(t, "t")
    if a.ndim != 3:
        raise ShapeError(f"expected (K,H,W), got shape {a.shape}")
    k = a.shape[0]
    flat = a.reshape(k, -1).astype(np.float64, copy=True)
    flat.sort(axis=1)
    out = flat.sum(axis=1)
    return _check_finite(out.astype(a.dtype), "spatial_sum")


def matvec(m, v) -> np.ndarray:
    """(N,K) matrix times (K,) vector -> (N,)."""
    a = _as_float(m, "m")
    b = _as_float(v, "v")
    if a.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"matvec expects (N,K) x (K,), got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape[1]} vs {b.shape[0]}")
    return _check_finite(a @ b, "matvec")


def softmax(v) -> np.ndarray:
    """Stable softmax over a 1-D vector; outputs lie strictly inside (0,1).

    The max is subtracted before exponentiation. Equal inputs map to equal
    outputs exactly (ties stay ties).
    """
    a = _as_float(v, "v")
    if a.ndim != 1 or a.size == 0:
        raise ShapeError(f"softmax expects a nonempty 1-D vector, got shape {a.shape}")
    _check_finite(a, "softmax input")
    z = a.astype(np.float64)
    z = z - z.max()
    e = np.exp(z)
    p = e / e.sum()
    p = np.clip(p, _ACT_LO, _ACT_HI)
    return p.astype(a.dtype)


def sigmoid(x) -> np.ndarray:
    """Elementwise logistic function; outputs lie strictly inside (0,1).

    Uses the sign-split form (exp of a nonpositive argument only) so large
    magnitudes neither overflow nor underflow to exact 0/1.
    """
    a = _as_float(x, "x")
    _check_finite(a, "sigmoid input")
    z = np.asarray(a, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    en = np.exp(z[~pos])
    out[~pos] = en / (1.0 + en)
    out = np.clip(out, _ACT_LO, _ACT_HI)
    return out.astype(a.dtype) if a.shape else out.astype(a.dtype).reshape(())
