"""Cost counter against straight-line arithmetic with frozen totals."""

from featexport.flops import (
    backbone_costs,
    bn_flops,
    conv_flops,
    feature_shapes,
    relu_flops,
)


def test_primitive_formulas():
    assert conv_flops(64, 32, 32, 3, 3, 3) == 2 * 64 * 32 * 32 * 27
    assert bn_flops(64, 32, 32) == 2 * 64 * 1024
    assert relu_flops(64, 32, 32) == 64 * 1024


def test_stem_hand_count():
    c = backbone_costs(10)
    # conv 2*64*1024*27, bn 2*64*1024, relu 64*1024
    assert c.stem == 3538944 + 131072 + 65536 == 3735552


def test_group_hand_counts():
    """Every group total re-derived layer by layer, independent literals."""
    c = backbone_costs(10)

    # group 1: two 64->64 blocks at 32x32, no shortcut projection.
    conv64 = 2 * 64 * 1024 * 64 * 9          # 75497472
    bn64, act64 = 2 * 64 * 1024, 64 * 1024
    block = 2 * conv64 + 2 * bn64 + act64 + 2 * act64
    assert c.groups[0] == 2 * block == 302907392

    # group 2: 64->128 stride 2 with projection, then 128->128 at 16x16.
    conv_in = 2 * 128 * 256 * 64 * 9         # 37748736
    conv128 = 2 * 128 * 256 * 128 * 9        # 75497472
    bn128, act128 = 2 * 128 * 256, 128 * 256
    down = 2 * 128 * 256 * 64 * 1            # 4194304
    first = conv_in + bn128 + act128 + conv128 + bn128 \
        + down + bn128 + 2 * act128
    second = 2 * conv128 + 2 * bn128 + act128 + 2 * act128
    assert c.groups[1] == first + second == 268959744

    # group 3: 128->256 stride 2 with projection, then 256->256 at 8x8.
    conv_in = 2 * 256 * 64 * 128 * 9
    conv256 = 2 * 256 * 64 * 256 * 9
    bn256, act256 = 2 * 256 * 64, 256 * 64
    down = 2 * 256 * 64 * 128
    first = conv_in + bn256 + act256 + conv256 + bn256 \
        + down + bn256 + 2 * act256
    second = 2 * conv256 + 2 * bn256 + act256 + 2 * act256
    assert c.groups[2] == first + second == 268697600

    # group 4: 256->512 stride 2 with projection, then 512->512 at 4x4.
    conv_in = 2 * 512 * 16 * 256 * 9
    conv512 = 2 * 512 * 16 * 512 * 9
    bn512, act512 = 2 * 512 * 16, 512 * 16
    down = 2 * 512 * 16 * 256
    first = conv_in + bn512 + act512 + conv512 + bn512 \
        + down + bn512 + 2 * act512
    second = 2 * conv512 + 2 * bn512 + act512 + 2 * act512
    assert c.groups[3] == first + second == 268566528


def test_tail_hand_count():
    c = backbone_costs(10)
    assert c.pool == 512 * 16
    assert c.classifier == 2 * 512 * 10 + 10
    assert c.final_tail(3) == 268566528 + 8192 + 10250 == 268584970


def test_cumulative_strictly_increases():
    c = backbone_costs(10)
    cums = [c.cumulative_through_group(g) for g in (1, 2, 3, 4)]
    assert cums == sorted(cums)
    assert len(set(cums)) == 4
    assert cums[0] == 3735552 + 302907392 == 306642944
    assert cums[2] == 844300288


def test_classifier_scales_with_classes():
    assert backbone_costs(100).classifier == 2 * 512 * 100 + 100
    assert backbone_costs(100).groups == backbone_costs(10).groups


def test_feature_shapes():
    assert feature_shapes(3) == [(64, 32, 32), (128, 16, 16), (256, 8, 8)]
    assert feature_shapes(2) == [(64, 32, 32), (128, 16, 16)]
