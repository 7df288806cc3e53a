"""
Parameter and multiply-accumulate accounting
Walks a model forward on a data-less input, collects one row per executed op
and fits the growth of LKA block cost against the channel width
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from utils.blocks import LkaBlock, LkaKernels
from utils.errors import ArgumentError
from utils.nn import Module, current_scope
from utils.tensor import Tensor, cost_listener, make_rng, no_grad

logger = logging.getLogger(__name__)

FLOPS_PER_MAC = 2
COLUMNS = ["layer", "kind", "params", "macs", "elementwise", "output_shape"]


def count_conv3d(spec, out_shape):
    """
    Parameters and MACs of one convolution

    Args:
        spec: Conv3dSpec
        out_shape: (b, out_channels, S', H', W')

    Returns:
        (params, macs)
    """
    k_volume = spec.kernel[0] * spec.kernel[1] * spec.kernel[2]
    weights = spec.out_channels * (spec.in_channels // spec.groups) * k_volume
    params = weights + (spec.out_channels if spec.has_bias else 0)
    b, _, s, h, w = out_shape
    return params, weights * b * s * h * w


@dataclass
class CostReport:
    """Per-op cost rows of one forward pass"""
    rows: pd.DataFrame
    input_shape: tuple
    config_digest: str = ""
    model_name: str = ""
    model_params: int = 0
    notes: list = field(default_factory=list)

    @property
    def total_params(self):
        return int(self.rows["params"].sum()) if len(self.rows) else 0

    @property
    def total_macs(self):
        return int(self.rows["macs"].sum()) if len(self.rows) else 0

    @property
    def total_flops(self):
        return FLOPS_PER_MAC * self.total_macs

    @property
    def total_elementwise(self):
        return int(self.rows["elementwise"].sum()) if len(self.rows) else 0

    def by_scope(self, depth=1):
        """Totals grouped by the first depth components of the layer path"""
        if not len(self.rows):
            return pd.DataFrame(columns=["scope", "params", "macs", "elementwise"])
        scope = self.rows["layer"].map(lambda path: ".".join(path.split(".")[:depth]) or "<root>")
        grouped = self.rows.assign(scope=scope).groupby("scope", sort=False)[["params", "macs", "elementwise"]].sum()
        return grouped.reset_index()

    def to_csv(self, path):
        self.rows.to_csv(path, index=False)

    def header(self, reference=None):
        lines = [
            f"model: {self.model_name or '-'}   input: {tuple(self.input_shape)}   config: {self.config_digest[:12] or '-'}",
            f"1 MAC = {FLOPS_PER_MAC} FLOPs; BN and activation costs are listed as elementwise ops",
            f"params (counted ops): {self.total_params:,}   params (model): {self.model_params:,}",
            f"MACs: {self.total_macs:,}   FLOPs: {self.total_flops / 1e9:.2f} G   elementwise: {self.total_elementwise:,}",
        ]
        if reference:
            lines.append(f"reference: {reference['gflops']:.2f} GFLOPs / {reference['params_m']:.1f} M params   "
                         f"computed: {self.total_flops / 1e9:.2f} GFLOPs / {self.model_params / 1e6:.2f} M params")
        return lines + list(self.notes)

    def to_text(self, reference=None, depth=2):
        """Aligned text table: header, per-scope totals, column sums"""
        table = self.by_scope(depth)
        body = table.to_string(index=False) if len(table) else "(no layers)"
        return "\n".join(self.header(reference) + ["", body])


def count_model(model, input_shape, config_digest="", name=None):
    """
    Walk a model forward on a meta input and collect its op costs

    Args:
        model: Module
        input_shape: (b, C, S, H, W)
        config_digest: Digest of the config the model was built from

    Returns:
        CostReport with rows in forward order
    """
    rows = []

    def record(kind, params, macs, elementwise, shape):
        rows.append((current_scope(), kind, params, macs, elementwise, "x".join(map(str, shape))))

    was_training = model.training
    model.eval()
    try:
        with no_grad(), cost_listener(record):
            model(Tensor.meta(tuple(input_shape)))
    finally:
        model.train(was_training)
    frame = pd.DataFrame(rows, columns=COLUMNS)
    for column in ("params", "macs", "elementwise"):
        frame[column] = frame[column].astype("int64")
    logger.info("counted %d ops of %s on %s", len(frame), type(model).__name__, tuple(input_shape))
    return CostReport(frame, tuple(input_shape), config_digest, name or type(model).__name__,
                      model.num_parameters())


class BlockStack(Module):
    """LKA blocks run back to back on tokens of a fixed grid"""

    def __init__(self, blocks, spatial):
        super().__init__()
        self.count = len(blocks)
        self.spatial = tuple(spatial)
        for i, block in enumerate(blocks):
            self.add_module(f"block{i}", block)

    def forward(self, tokens):
        for i in range(self.count):
            tokens = self.child(f"block{i}")(tokens, self.spatial)
        return tokens


def count_lka_blocks(channels, spatial=(8, 8, 8), blocks=1, mlp_ratio=4, kernels=LkaKernels(), batch=1):
    """
    CostReport of `blocks` stacked LKA blocks of width `channels`

    Args:
        spatial: (S, H, W) token grid
    """
    rng = make_rng(0)
    stack = BlockStack([LkaBlock(channels, mlp_ratio, kernels, rng) for _ in range(blocks)], spatial)
    tokens = (batch, int(np.prod(spatial)), channels)
    return count_model(stack, tokens, name=f"LkaBlock x{blocks} (C={channels})")


def verify_lka_complexity(channel_sweep, spatial=(8, 8, 8), mlp_ratio=4, kernels=LkaKernels()):
    """
    Log-log least-squares slope of counted LKA block MACs against C

    Raises:
        ArgumentError: fewer than two channel points
    """
    channel_sweep = [int(c) for c in channel_sweep]
    if len(channel_sweep) < 2:
        raise ArgumentError("need at least two channel widths to fit an exponent")
    macs = [count_lka_blocks(c, spatial, 1, mlp_ratio, kernels).total_macs for c in channel_sweep]
    slope, _ = np.polyfit(np.log(channel_sweep), np.log(macs), 1)
    logger.info("LKA MAC exponent over C=%s: %.3f", channel_sweep, slope)
    return float(slope)


def lka_closed_form(channels, spatial, kernel=21, dilation=3, kernel_dims=2):
    """
    ((K/d)^k * C + (2d-1)^k + C) * C * S * H * W

    The published expression uses planar factors (kernel_dims=2); kernel_dims=3
    gives the volumetric reading. K=21, d=3 matches a 5^3 depthwise plus a
    7^3 depthwise convolution with dilation 3.
    """
    s, h, w = spatial
    local = (2 * dilation - 1) ** kernel_dims
    dilated = (kernel / dilation) ** kernel_dims
    return (dilated * channels + local + channels) * channels * s * h * w
