"""
Unit tests for parameter and MAC accounting
Tests the per-conv counts, the meta walk over whole models, the LKA
complexity fit and the reference comparison of the normal model
"""

import numpy as np
import pytest

from config import PUBLISHED_REFERENCE_GFLOPS, PUBLISHED_REFERENCE_PARAMS_M, RunConfig
from models import ConvBnAct, build_model
from utils.errors import ArgumentError
from utils.flops import (COLUMNS, count_conv3d, count_lka_blocks, count_model, lka_closed_form,
                         verify_lka_complexity)
from utils.nn import Conv3d, Module
from utils.ops import Conv3dSpec
from utils.tensor import make_rng


class Passthrough(Module):
    """A model without a single op"""

    def forward(self, x):
        return x


def enumerate_macs(spec, out_shape):
    """One multiply per output element per kernel tap per input channel of its group"""
    b, c_out, s, h, w = out_shape
    per_output = (spec.in_channels // spec.groups) * int(np.prod(spec.kernel))
    total = 0
    for _ in range(b * c_out):
        for _ in range(s * h * w):
            total += per_output
    return total


def test_pointwise_and_cube_kernels():
    """Test the counts of a 1x1x1 conv on 2^3 voxels and a 2^3 kernel on one voxel"""
    pointwise = Conv3dSpec(1, 1, kernel=1, has_bias=False)
    assert count_conv3d(pointwise, (1, 1, 2, 2, 2)) == (1, 8)
    cube = Conv3dSpec(1, 1, kernel=2, has_bias=False)
    assert count_conv3d(cube, (1, 1, 1, 1, 1)) == (8, 8)


def test_depthwise_counts():
    """Test a 3^3 depthwise conv over four channels on 5^3 voxels"""
    spec = Conv3dSpec.same(4, 4, 3, groups=4)
    params, macs = count_conv3d(spec, (1, 4, 5, 5, 5))
    assert params == 4 * 27 + 4
    assert macs == 4 * 27 * 125


@pytest.mark.parametrize("spec,out_shape", [
    (Conv3dSpec(3, 5, kernel=3, padding=1), (2, 5, 3, 4, 2)),
    (Conv3dSpec(4, 6, kernel=(1, 3, 2), groups=2), (1, 6, 2, 2, 3)),
    (Conv3dSpec.same(6, 6, 5, dilation=2, groups=6), (1, 6, 3, 3, 3)),
])
def test_conv_counts_match_enumeration(spec, out_shape):
    """Test the MAC formula against per-output enumeration"""
    assert count_conv3d(spec, out_shape)[1] == enumerate_macs(spec, out_shape)


def test_walk_of_single_conv_matches_formula():
    """Test one row with the formula's counts and the shape string"""
    spec = Conv3dSpec(2, 3, kernel=3, stride=2, padding=1)
    report = count_model(Conv3d(spec, make_rng(0)), (1, 2, 8, 8, 8))
    assert list(report.rows.columns) == COLUMNS
    assert len(report.rows) == 1
    row = report.rows.iloc[0]
    assert (row["params"], row["macs"]) == count_conv3d(spec, (1, 3, 4, 4, 4))
    assert row["output_shape"] == "1x3x4x4x4"
    assert report.total_flops == 2 * report.total_macs


def test_counted_params_cover_conv_and_norm():
    """Test that a conv-norm-activation unit reports all of its parameters"""
    unit = ConvBnAct(2, 4, make_rng(1))
    report = count_model(unit, (1, 2, 4, 4, 4))
    assert report.total_params == unit.num_parameters()
    assert set(report.rows["kind"]) == {"conv3d", "batchnorm3d", "leaky_relu"}


def test_model_without_layers_reports_zero():
    """Test empty reports"""
    report = count_model(Passthrough(), (1, 1, 4, 4, 4))
    assert report.total_params == 0 and report.total_macs == 0
    assert "(no layers)" in report.to_text()


def test_batch_doubling_doubles_macs():
    """Test MACs and elementwise counts are linear in the batch, params are not"""
    model = build_model(RunConfig(num_classes=3).model_config(), seed=0)
    one = count_model(model, (1, 1, 16, 16, 16))
    two = count_model(model, (2, 1, 16, 16, 16))
    assert two.total_macs == 2 * one.total_macs
    assert two.total_elementwise == 2 * one.total_elementwise
    assert two.total_params == one.total_params
    assert model.training


def test_breakdown_sums_to_totals():
    """Test that per-scope totals add up to the column sums at every depth"""
    model = build_model(RunConfig(num_classes=3).model_config(), seed=0)
    report = count_model(model, (1, 1, 16, 16, 16), config_digest="abc123")
    for depth in (1, 2, 3):
        table = report.by_scope(depth)
        assert int(table["macs"].sum()) == report.total_macs
        assert int(table["params"].sum()) == report.total_params
    scopes = set(report.by_scope(1)["scope"])
    assert {"global", "local", "head"} <= scopes
    assert "config: abc123" in report.to_text()


def test_spatial_doubling_doubles_block_macs():
    """Test that MACs are linear in the slice count"""
    short = count_lka_blocks(16, spatial=(8, 8, 8))
    deep = count_lka_blocks(16, spatial=(8, 8, 16))
    assert deep.total_macs / short.total_macs == 2.0


def test_block_count_stacks_linearly():
    """Test that T*L blocks cost T*L times one block"""
    single = count_lka_blocks(8, spatial=(4, 4, 4))
    stacked = count_lka_blocks(8, spatial=(4, 4, 4), blocks=6)
    assert stacked.total_macs == 6 * single.total_macs
    assert stacked.total_params == 6 * single.total_params


def test_counted_exponent_approaches_quadratic():
    """Test the fitted MAC exponent once the pointwise terms dominate"""
    slope = verify_lka_complexity([256, 512, 1024, 2048])
    assert 1.8 <= slope <= 2.05
    small = verify_lka_complexity([8, 16, 32, 64])
    assert 1.0 < small < slope
    with pytest.raises(ArgumentError):
        verify_lka_complexity([64])


def test_closed_form_exponent_and_linearity():
    """Test the closed form's growth in C and its linear spatial factor"""
    channels = np.array([8, 16, 32, 64])
    values = [lka_closed_form(c, (8, 8, 8)) for c in channels]
    slope, _ = np.polyfit(np.log(channels), np.log(values), 1)
    assert 1.8 <= slope <= 2.05
    assert lka_closed_form(32, (8, 8, 16)) == 2 * lka_closed_form(32, (8, 8, 8))
    assert lka_closed_form(1, (1, 1, 1)) == pytest.approx(49 + 25 + 1)
    assert lka_closed_form(1, (1, 1, 1), kernel_dims=3) == pytest.approx(343 + 125 + 1)


def test_normal_model_is_within_an_order_of_magnitude_of_reference():
    """Test the normal dual-path model at 96^3 against the published totals"""
    cfg = RunConfig(variant="normal")
    model = build_model(cfg.model_config(), seed=0)
    report = count_model(model, (1, 1, 96, 96, 96))
    gflops = report.total_flops / 1e9
    params_m = report.model_params / 1e6
    assert PUBLISHED_REFERENCE_GFLOPS / 10 <= gflops <= PUBLISHED_REFERENCE_GFLOPS * 10
    assert PUBLISHED_REFERENCE_PARAMS_M / 10 <= params_m <= PUBLISHED_REFERENCE_PARAMS_M * 10
    text = report.to_text({"gflops": PUBLISHED_REFERENCE_GFLOPS, "params_m": PUBLISHED_REFERENCE_PARAMS_M})
    assert "246.96" in text and "67.5" in text
