"""Frozen ResNet18 forward pass in numpy, CIFAR-style 32x32 stem.

The stem is a single 3x3 stride-1 convolution with no max-pool, so a 32x32
input stays 32x32 through the first residual group. Four groups of two basic
blocks follow (64, 128, 256, 512 channels; groups 2-4 downsample by 2), then
global average pooling and a dense classifier.

The architecture is described once in ARCH and walked by both the forward
pass here and the FLOPs counter in flops.py, so the cost metadata can never
drift from the network that actually ran. Weights live in a plain .npz of
named float32 arrays; nothing here trains, there is no autograd.
"""

from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
STEM_VARIANT = "cifar-3x3-stride1-nopool"

# channel plan and strides of the four groups; two basic blocks each
GROUP_CHANNELS = (64, 128, 256, 512)
GROUP_STRIDES = (1, 2, 2, 2)
BLOCKS_PER_GROUP = 2
STEM_CHANNELS = 64
INPUT_CHANNELS = 3
INPUT_SIZE = 32


@dataclass(frozen=True)
class BlockPlan:
    in_ch: int
    out_ch: int
    stride: int

    @property
    def downsamples(self) -> bool:
        return self.stride != 1 or self.in_ch != self.out_ch


def architecture() -> list:
    """Block plans per group: [[BlockPlan, ...] per group]."""
    groups = []
    in_ch = STEM_CHANNELS
    for out_ch, stride in zip(GROUP_CHANNELS, GROUP_STRIDES):
        blocks = []
        for b in range(BLOCKS_PER_GROUP):
            blocks.append(BlockPlan(in_ch=in_ch, out_ch=out_ch,
                                    stride=stride if b == 0 else 1))
            in_ch = out_ch
        groups.append(blocks)
    return groups


ARCH = architecture()


class WeightError(ValueError):
    pass


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1,
           pad: int = 1) -> np.ndarray:
    """Cross-correlation of a batch (B,C,H,W) with kernels (O,C,kh,kw)."""
    b, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise WeightError(f"conv expects {ci} input channels, got {c}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    _, _, ho, wo, _, _ = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    out = cols @ w.reshape(o, -1).T.astype(np.float32)
    return np.ascontiguousarray(
        out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))


def batchnorm(x: np.ndarray, gamma, beta, mean, var) -> np.ndarray:
    """Inference-mode normalization folded to one scale and one shift."""
    scale = (gamma / np.sqrt(var + BN_EPS)).astype(np.float32)
    shift = (beta - mean * scale).astype(np.float32)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _bn_names(prefix):
    return [f"{prefix}.gamma", f"{prefix}.beta", f"{prefix}.mean",
            f"{prefix}.var"]


def weight_names(num_classes: int = 10) -> list:
    """Every array key a weight bundle must contain, in a fixed order."""
    names = ["stem.conv.w"] + _bn_names("stem.bn")
    for g, blocks in enumerate(ARCH, start=1):
        for b, plan in enumerate(blocks):
            base = f"g{g}.b{b}"
            names += [f"{base}.conv1.w"] + _bn_names(f"{base}.bn1")
            names += [f"{base}.conv2.w"] + _bn_names(f"{base}.bn2")
            if plan.downsamples:
                names += [f"{base}.down.w"] + _bn_names(f"{base}.down.bn")
    names += ["fc.w", "fc.b", "norm.mean", "norm.std"]
    return names


def _expected_shapes(num_classes: int) -> dict:
    shapes = {"stem.conv.w": (STEM_CHANNELS, INPUT_CHANNELS, 3, 3)}
    for nm in _bn_names("stem.bn"):
        shapes[nm] = (STEM_CHANNELS,)
    for g, blocks in enumerate(ARCH, start=1):
        for b, plan in enumerate(blocks):
            base = f"g{g}.b{b}"
            shapes[f"{base}.conv1.w"] = (plan.out_ch, plan.in_ch, 3, 3)
            shapes[f"{base}.conv2.w"] = (plan.out_ch, plan.out_ch, 3, 3)
            for nm in _bn_names(f"{base}.bn1") + _bn_names(f"{base}.bn2"):
                shapes[nm] = (plan.out_ch,)
            if plan.downsamples:
                shapes[f"{base}.down.w"] = (plan.out_ch, plan.in_ch, 1, 1)
                for nm in _bn_names(f"{base}.down.bn"):
                    shapes[nm] = (plan.out_ch,)
    shapes["fc.w"] = (num_classes, GROUP_CHANNELS[-1])
    shapes["fc.b"] = (num_classes,)
    shapes["norm.mean"] = (INPUT_CHANNELS,)
    shapes["norm.std"] = (INPUT_CHANNELS,)
    return shapes


class Weights:
    """Validated bundle of named float32 arrays for one backbone."""

    def __init__(self, arrays: dict):
        probe = arrays.get("fc.w")
        if probe is None:
            raise WeightError("weight bundle is missing fc.w")
        num_classes = int(np.asarray(probe).shape[0])
        expected = _expected_shapes(num_classes)
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise WeightError(f"weight bundle is missing {missing[:4]}"
                              f"{'...' if len(missing) > 4 else ''}")
        self.arrays = {}
        for name, shape in expected.items():
            a = np.ascontiguousarray(arrays[name], dtype=np.float32)
            if a.shape != shape:
                raise WeightError(
                    f"{name} has shape {a.shape}, expected {shape}")
            self.arrays[name] = a
        if np.any(self.arrays["norm.std"] <= 0):
            raise WeightError("norm.std entries must be positive")
        self.num_classes = num_classes

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def bn(self, prefix):
        return tuple(self.arrays[n] for n in _bn_names(prefix))


def save_weights(w: Weights, path: str):
    np.savez(path, **w.arrays)


def load_weights(path: str) -> Weights:
    try:
        with np.load(path) as z:
            return Weights({k: z[k] for k in z.files})
    except (OSError, ValueError) as exc:
        raise WeightError(f"cannot read weight bundle {path}: {exc}") from None


# default input normalization for the random stand-in bundle; real bundles
# carry whatever statistics their backbone was trained with
DEFAULT_NORM_MEAN = (0.4789, 0.4723, 0.4305)
DEFAULT_NORM_STD = (0.2421, 0.2383, 0.2587)


def random_weights(seed: int, num_classes: int = 10) -> Weights:
    """He-initialized stand-in bundle.

    Produces a structurally correct, deterministic backbone for format and
    pipeline tests. It is NOT a trained model; its predictions carry no
    information about the images.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    arrays = {}
    for name, shape in _expected_shapes(num_classes).items():
        if name.endswith(".w") and name != "fc.w":
            fan_in = int(np.prod(shape[1:]))
            arrays[name] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
        elif name == "fc.w":
            arrays[name] = rng.normal(
                0.0, np.sqrt(1.0 / shape[1]), size=shape).astype(np.float32)
        elif name == "fc.b":
            arrays[name] = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".gamma"):
            arrays[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".var"):
            arrays[name] = np.ones(shape, dtype=np.float32)
        elif name == "norm.mean":
            arrays[name] = np.asarray(DEFAULT_NORM_MEAN, dtype=np.float32)
        elif name == "norm.std":
            arrays[name] = np.asarray(DEFAULT_NORM_STD, dtype=np.float32)
        else:  # beta, mean
            arrays[name] = np.zeros(shape, dtype=np.float32)
    return Weights(arrays)


def normalize_images(images: np.ndarray, w: Weights) -> np.ndarray:
    """uint8 (B,H,W,3) pixels to normalized float32 (B,3,H,W)."""
    if images.ndim != 4 or images.shape[3] != INPUT_CHANNELS:
        raise WeightError(f"expected (B,H,W,3) pixels, got {images.shape}")
    x = images.astype(np.float32) / 255.0
    x = (x - w["norm.mean"]) / w["norm.std"]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _block(x, w: Weights, base: str, plan: BlockPlan) -> np.ndarray:
    out = conv2d(x, w[f"{base}.conv1.w"], stride=plan.stride, pad=1)
    out = relu(batchnorm(out, *w.bn(f"{base}.bn1")))
    out = conv2d(out, w[f"{base}.conv2.w"], stride=1, pad=1)
    out = batchnorm(out, *w.bn(f"{base}.bn2"))
    if plan.downsamples:
        sc = conv2d(x, w[f"{base}.down.w"], stride=plan.stride, pad=0)
        sc = batchnorm(sc, *w.bn(f"{base}.down.bn"))
    else:
        sc = x
    return relu(out + sc)


def forward(w: Weights, x: np.ndarray, taps: int = 3):
    """Run the backbone on a normalized batch (B,3,32,32).

    Returns (features, logits): features is a list with the activations
    after each of the first ``taps`` groups, logits is (B, num_classes).
    """
    if x.ndim != 4 or x.shape[1:] != (INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE):
        raise WeightError(
            f"expected (B,{INPUT_CHANNELS},{INPUT_SIZE},{INPUT_SIZE}) input, "
            f"got {x.shape}")
    out = relu(batchnorm(conv2d(x, w["stem.conv.w"], stride=1, pad=1),
                         *w.bn("stem.bn")))
    features = []
    for g, blocks in enumerate(ARCH, start=1):
        for b, plan in enumerate(blocks):
            out = _block(out, w, f"g{g}.b{b}", plan)
        if g <= taps:
            features.append(out)
    pooled = out.mean(axis=(2, 3))
    logits = pooled @ w["fc.w"].T + w["fc.b"]
    return features, logits
