"""Block-level shape contracts, schedule invariants, and parameter sums."""

import numpy as np
import pytest

from cunets import autodiff as ad
from cunets.autodiff import Tensor
from cunets.blocks import (
    ASPP,
    BatchNorm,
    Bridge,
    Conv2D,
    ConvUnit,
    MultiResBlock,
    ResPath,
    StandardBlock,
    Upsample2x,
    maxpool2,
)
from cunets.errors import ConfigurationError
from cunets.schedule import FilterSchedule

import param_oracle

SCHED = FilterSchedule()


def make_rng():
    return np.random.default_rng(7)


def run(module, shape, training=False, dtype=np.float32, seed=3):
    x = Tensor(np.random.default_rng(seed).random(shape).astype(dtype))
    return module(x, training=training)


# ----------------------------------------------------------- conv units


def test_conv_unit_shape_contract():
    unit = ConvUnit(3, 32, 3, rng=make_rng(), dtype=np.float32)
    y = run(unit, (1, 8, 8, 3))
    assert y.data.shape == (1, 8, 8, 32)


def test_conv_unit_1x1_level1_width():
    unit = ConvUnit(3, 51, 1, rng=make_rng(), dtype=np.float32)
    y = run(unit, (1, 8, 8, 3))
    assert y.data.shape == (1, 8, 8, 51)


def test_conv_unit_zero_input_zero_bias_is_zero():
    unit = ConvUnit(3, 8, 3, activation=False, batchnorm=False, rng=make_rng(), dtype=np.float64)
    y = unit(Tensor(np.zeros((1, 8, 8, 3))))
    np.testing.assert_array_equal(y.data, 0.0)


def test_conv_unit_rejects_bad_config():
    with pytest.raises(ConfigurationError):
        Conv2D(3, 8, kernel_size=2, rng=make_rng(), dtype=np.float32)
    with pytest.raises(ConfigurationError):
        Conv2D(3, 0, rng=make_rng(), dtype=np.float32)
    with pytest.raises(ConfigurationError):
        ConvUnit(3, 8, order="backwards", rng=make_rng(), dtype=np.float32)


def test_conv_channel_mismatch_is_configuration_error():
    unit = ConvUnit(3, 8, 3, rng=make_rng(), dtype=np.float32)
    with pytest.raises(ConfigurationError):
        run(unit, (1, 8, 8, 5))


def test_single_conv_param_count_example():
    conv = Conv2D(1, 32, 3, rng=make_rng(), dtype=np.float32)
    assert conv.param_count() == 9 * 1 * 32 + 32 == 320


# ----------------------------------------------------------- multires


def test_multires_level1_width():
    block = MultiResBlock(1, 1, SCHED, rng=make_rng(), dtype=np.float32)
    y = run(block, (1, 16, 16, 1))
    assert y.data.shape == (1, 16, 16, 51)


def test_multires_level4_width():
    block = MultiResBlock(426, 4, SCHED, rng=make_rng(), dtype=np.float32)
    y = run(block, (1, 4, 4, 426))
    assert y.data.shape == (1, 4, 4, 426)


@pytest.mark.parametrize("level,cin", [(1, 1), (1, 64), (2, 51), (3, 105), (4, 212)])
def test_multires_param_count_matches_hand_sum(level, cin):
    block = MultiResBlock(cin, level, SCHED, rng=make_rng(), dtype=np.float32)
    assert block.param_count() == param_oracle.multires_block(cin, level)


def test_filter_sum_identity():
    for level in (1, 2, 3, 4):
        triple = SCHED.multires_triple(level)
        assert sum(triple) == SCHED.multires_width(level)
    assert SCHED.multires_1x1_filters == (51, 105, 212, 426)


def test_schedule_rejects_broken_sum():
    with pytest.raises(ConfigurationError):
        FilterSchedule(multires_3x3_filters=((8, 17, 27), (17, 35, 53),
                                             (35, 71, 106), (71, 142, 213)))


def test_schedule_rejects_nondecreasing_lengths():
    with pytest.raises(ConfigurationError):
        FilterSchedule(respath_lengths=(4, 3, 3, 1))


# ----------------------------------------------------------- standard


def test_standard_block_shapes():
    b1 = StandardBlock(1, 32, rng=make_rng(), dtype=np.float32)
    assert run(b1, (1, 16, 16, 1)).data.shape == (1, 16, 16, 32)
    b2 = StandardBlock(32, 64, rng=make_rng(), dtype=np.float32)
    assert run(b2, (1, 8, 8, 32)).data.shape == (1, 8, 8, 64)


# ------------------------------------------------------------ respath


def test_respath_level1_chain():
    path = ResPath(51, 1, SCHED, rng=make_rng(), dtype=np.float32)
    assert path.length == 4 and path.filters == 32
    y = run(path, (1, 32, 32, 51))
    assert y.data.shape == (1, 32, 32, 32)


def test_respath_level4_single_unit():
    path = ResPath(426, 4, SCHED, rng=make_rng(), dtype=np.float32)
    assert path.length == 1 and path.filters == 256
    y = run(path, (1, 4, 4, 426))
    assert y.data.shape == (1, 4, 4, 256)


def test_respath_level2_is_three_units_of_64():
    path = ResPath(64, 2, SCHED, rng=make_rng(), dtype=np.float32)
    assert len(path.units) == 3
    assert all(u.main.filters == 64 for u in path.units)


@pytest.mark.parametrize("level,cin", [(1, 51), (2, 105), (3, 212), (4, 426)])
def test_respath_param_count_matches_hand_sum(level, cin):
    path = ResPath(cin, level, SCHED, rng=make_rng(), dtype=np.float32)
    assert path.param_count() == param_oracle.respath(cin, level)


# --------------------------------------------------------------- aspp


def test_aspp_bottleneck_shape():
    aspp = ASPP(426, 512, rng=make_rng(), dtype=np.float32)
    with pytest.warns(UserWarning):
        y = run(aspp, (1, 14, 14, 426))
    assert y.data.shape == (1, 14, 14, 512)


def test_aspp_output_layer_shape():
    aspp = ASPP(51, 32, rng=make_rng(), dtype=np.float32)
    y = run(aspp, (1, 32, 32, 51))
    assert y.data.shape == (1, 32, 32, 32)


def test_aspp_dilation_rates():
    aspp = ASPP(8, 16, rng=make_rng(), dtype=np.float32)
    assert aspp.dilations == (1, 6, 8, 12)
    assert [b.conv.dilation for b in aspp.branches] == [1, 6, 8, 12]


def test_aspp_small_input_warns_not_errors():
    aspp = ASPP(4, 8, rng=make_rng(), dtype=np.float32)
    with pytest.warns(UserWarning, match="dilated"):
        y = run(aspp, (1, 4, 4, 4))
    assert y.data.shape == (1, 4, 4, 8)


@pytest.mark.parametrize("merge", ["sum", "concat"])
def test_aspp_param_count_matches_hand_sum(merge):
    aspp = ASPP(256, 512, merge=merge, rng=make_rng(), dtype=np.float32)
    assert aspp.param_count() == param_oracle.aspp(256, 512, merge)


# ---------------------------------------------------- upsample / bridge


def test_upsample_doubles_dims():
    up = Upsample2x(512, 256, rng=make_rng(), dtype=np.float32)
    assert run(up, (1, 14, 14, 512)).data.shape == (1, 28, 28, 256)
    up2 = Upsample2x(64, 32, rng=make_rng(), dtype=np.float32)
    assert run(up2, (1, 112, 112, 64)).data.shape == (1, 224, 224, 32)


def test_upsample_rejects_odd_dims():
    up = Upsample2x(4, 4, rng=make_rng(), dtype=np.float32)
    with pytest.raises(ConfigurationError):
        run(up, (1, 7, 8, 4))


def test_pool_then_upsample_restores_dims():
    x = Tensor(np.random.default_rng(0).random((1, 16, 16, 4)).astype(np.float32))
    pooled = maxpool2(x)
    up = Upsample2x(4, 4, rng=make_rng(), dtype=np.float32)
    assert up(pooled).data.shape[1:3] == (16, 16)


def test_bridge_doubles_channels():
    bridge = Bridge(51, 32, rng=make_rng(), dtype=np.float32)
    assert run(bridge, (1, 16, 16, 51)).data.shape == (1, 16, 16, 64)
    bridge64 = Bridge(32, 32, rng=make_rng(), dtype=np.float32)
    assert run(bridge64, (1, 64, 64, 32)).data.shape == (1, 64, 64, 64)


def test_bridge_zero_linearity():
    bridge = Bridge(5, 7, rng=make_rng(), dtype=np.float64)
    bridge.bn.gamma.data[:] = 1.0  # identity-ish bn in train mode on zeros
    y = bridge(Tensor(np.zeros((1, 8, 8, 5))), training=False)
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_bridge_alternate_concat_mode():
    bridge = Bridge(5, 7, duplicate=False, rng=make_rng(), dtype=np.float32)
    assert run(bridge, (1, 8, 8, 5)).data.shape == (1, 8, 8, 12)


# ------------------------------------------------------ determinism, bn


def test_identical_seeds_give_bit_identical_params():
    a = MultiResBlock(3, 2, SCHED, rng=np.random.default_rng(42), dtype=np.float32)
    b = MultiResBlock(3, 2, SCHED, rng=np.random.default_rng(42), dtype=np.float32)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_unit_order_flag_changes_only_order_not_params():
    relu_bn = StandardBlock(3, 8, order="relu_bn", rng=np.random.default_rng(1), dtype=np.float64)
    bn_relu = StandardBlock(3, 8, order="bn_relu", rng=np.random.default_rng(1), dtype=np.float64)
    assert relu_bn.param_count() == bn_relu.param_count()
    x = Tensor(np.random.default_rng(2).normal(size=(1, 8, 8, 3)))
    ya = relu_bn(x, training=True)
    yb = bn_relu(x, training=True)
    assert not np.allclose(ya.data, yb.data)
    # bn-then-relu output is nonnegative; relu-then-bn may go negative
    assert yb.data.min() >= 0.0


def test_batchnorm_eval_uses_running_stats(rng):
    bn = BatchNorm(3, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 4, 4, 3)) + 3.0)
    y_eval = bn(x, training=False)
    np.testing.assert_allclose(y_eval.data, x.data / np.sqrt(1 + 1e-3), rtol=1e-12)


def test_stride1_blocks_preserve_spatial_dims(rng):
    for mod, cin in (
        (MultiResBlock(5, 2, SCHED, rng=make_rng(), dtype=np.float32), 5),
        (StandardBlock(5, 8, rng=make_rng(), dtype=np.float32), 5),
        (ResPath(5, 3, SCHED, rng=make_rng(), dtype=np.float32), 5),
        (ASPP(5, 8, rng=make_rng(), dtype=np.float32), 5),
    ):
        y = run(mod, (2, 12, 12, cin))
        assert y.data.shape[1:3] == (12, 12)
