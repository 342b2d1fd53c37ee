"""Layer-wise FLOPs accounting for the backbone in resnet.py.

Counting convention, applied uniformly: a multiply-accumulate is 2 FLOPs;
inference batchnorm is one multiply and one add per element (2); ReLU is one
compare per element (1); a residual merge is one add per element (1); global
average pooling is HW-1 adds plus one divide per channel (HW); the dense
classifier is 2*in*out plus the bias adds. Convolutions carry no bias.

Everything is derived from the shared ARCH table, so the totals describe the
network that forward() actually executes, per sample.
"""

from dataclasses import dataclass

from .resnet import (
    ARCH,
    GROUP_STRIDES,
    INPUT_CHANNELS,
    INPUT_SIZE,
    STEM_CHANNELS,
)


def conv_flops(out_ch: int, out_h: int, out_w: int, in_ch: int,
               kh: int, kw: int) -> int:
    return 2 * out_ch * out_h * out_w * in_ch * kh * kw


def bn_flops(ch: int, h: int, w: int) -> int:
    return 2 * ch * h * w


def relu_flops(ch: int, h: int, w: int) -> int:
    return ch * h * w


@dataclass(frozen=True)
class CostBreakdown:
    """Per-sample costs: one entry per group plus the stem and the tail."""

    stem: int
    groups: tuple          # total per group, all four
    pool: int
    classifier: int

    def cumulative_through_group(self, g: int) -> int:
        """Backbone cost from input through group g inclusive (1-based)."""
        return self.stem + sum(self.groups[:g])

    def final_tail(self, taps: int) -> int:
        """Cost after the last tapped group: remaining groups, pool, fc."""
        return sum(self.groups[taps:]) + self.pool + self.classifier


def _block_flops(plan, h: int, w: int) -> tuple:
    """(flops, out_h, out_w) for one basic block entered at h x w."""
    oh, ow = h // plan.stride, w // plan.stride
    total = conv_flops(plan.out_ch, oh, ow, plan.in_ch, 3, 3)
    total += bn_flops(plan.out_ch, oh, ow) + relu_flops(plan.out_ch, oh, ow)
    total += conv_flops(plan.out_ch, oh, ow, plan.out_ch, 3, 3)
    total += bn_flops(plan.out_ch, oh, ow)
    if plan.downsamples:
        total += conv_flops(plan.out_ch, oh, ow, plan.in_ch, 1, 1)
        total += bn_flops(plan.out_ch, oh, ow)
    # merge add then the closing relu
    total += relu_flops(plan.out_ch, oh, ow) * 2
    return total, oh, ow


def backbone_costs(num_classes: int) -> CostBreakdown:
    h = w = INPUT_SIZE
    stem = conv_flops(STEM_CHANNELS, h, w, INPUT_CHANNELS, 3, 3) \
        + bn_flops(STEM_CHANNELS, h, w) + relu_flops(STEM_CHANNELS, h, w)
    groups = []
    for blocks in ARCH:
        total = 0
        for plan in blocks:
            cost, h, w = _block_flops(plan, h, w)
            total += cost
        groups.append(total)
    last_ch = ARCH[-1][-1].out_ch
    pool = last_ch * h * w
    classifier = 2 * last_ch * num_classes + num_classes
    return CostBreakdown(stem=stem, groups=tuple(groups), pool=pool,
                         classifier=classifier)


def feature_shapes(taps: int = 3) -> list:
    """(channels, h, w) after each of the first ``taps`` groups."""
    h = INPUT_SIZE
    shapes = []
    for blocks, stride in zip(ARCH, GROUP_STRIDES):
        h = h // stride
        shapes.append((blocks[-1].out_ch, h, h))
    return shapes[:taps]
