"""
Network models for the LoGoNet toolkit
Defines the U-shaped LKA feature extractor, the dual-path LoGoNet, the
segmentation and pre-training heads, and the sub-cube partition helpers
"""

from dataclasses import dataclass

import numpy as np

from config import LoGoNetConfig, UlkanetConfig
from utils import ops
from utils.blocks import LkaBlock, PatchEmbed
from utils.errors import PartitionError, ShapeError
from utils.nn import BatchNorm3d, Conv3d, Module
from utils.ops import Conv3dSpec
from utils.tensor import Tensor, concat, make_rng, split_rng

# Stream key of the parameter initializer inside make_rng(seed, key)
INIT_STREAM = 0


class ConvBnAct(Module):
    """Conv3D (same padding) + BatchNorm + activation"""

    def __init__(self, in_channels, out_channels, rng, kernel=3, act="leaky_relu"):
        super().__init__()
        self.conv = Conv3d(Conv3dSpec.same(in_channels, out_channels, kernel), rng)
        self.norm = BatchNorm3d(out_channels)
        self.act = act

    def forward(self, x):
        return ops.activation(self.act, self.norm(self.conv(x)))


class EncoderStage(Module):
    """Patch embedding, a stack of LKA blocks, BN, back to a volume"""

    def __init__(self, in_channels, dim, depth, mlp_ratio, kernel, stride, lka, rng):
        super().__init__()
        self.depth = depth
        self.embed = PatchEmbed(in_channels, dim, kernel, stride, rng)
        for j in range(depth):
            self.add_module(f"lka{j}", LkaBlock(dim, mlp_ratio, lka, rng))
        self.norm = BatchNorm3d(dim)

    def forward(self, x):
        tokens, spatial = self.embed(x)
        for j in range(self.depth):
            tokens = self.child(f"lka{j}")(tokens, spatial)
        b, _, c = tokens.shape
        return self.norm(tokens.permute(0, 2, 1).reshape((b, c) + tuple(spatial)))


class DecoderBlock(Module):
    """Three ConvBNLeakyReLU units followed by x2 upsampling"""

    def __init__(self, in_channels, out_channels, rng, upsample_mode="trilinear"):
        super().__init__()
        self.upsample_mode = upsample_mode
        self.conv1 = ConvBnAct(in_channels, out_channels, rng)
        self.conv2 = ConvBnAct(out_channels, out_channels, rng)
        self.conv3 = ConvBnAct(out_channels, out_channels, rng)

    def forward(self, x):
        return ops.upsample2x(self.conv3(self.conv2(self.conv1(x))), self.upsample_mode)


class Ulkanet(Module):
    """
    U-shaped feature extractor

    Children are named enc1..encN for the encoder stages and, in execution
    order, decN..dec1 plus final1.. for the decoder; the bottleneck block decN
    consumes the deepest stage and every deci concatenates the skip f_i.
    """

    def __init__(self, cfg: UlkanetConfig, rng):
        super().__init__()
        self.cfg = cfg
        in_channels = cfg.in_channels
        for i in range(cfg.num_stages):
            self.add_module(f"enc{i + 1}", EncoderStage(
                in_channels, cfg.dims[i], cfg.stage_depths[i], cfg.mlp_ratios[i],
                cfg.patch_kernels[i], cfg.patch_strides[i], cfg.lka, rng,
            ))
            in_channels = cfg.dims[i]
        self.plan = cfg.decoder_plan()
        for name, block_in, block_out, _ in self.plan:
            self.add_module(name, DecoderBlock(block_in, block_out, rng, cfg.upsample_mode))

    def check_input(self, x):
        """
        Raises:
            ShapeError: wrong rank, channel count, or extents not divisible by the stride product
        """
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected input (b, {self.cfg.in_channels}, S, H, W), got {x.shape}")
        multiple = self.cfg.required_multiple
        if any(n % multiple for n in x.shape[2:]):
            raise ShapeError(f"input extents {x.shape[2:]} must be divisible by {multiple}")

    def encode(self, x):
        """
        Run the encoder stages

        Args:
            x: Tensor (b, in_channels, S, H, W)

        Returns:
            List of stage features [f1..fN]
        """
        self.check_input(x)
        features = []
        for i in range(1, self.cfg.num_stages + 1):
            try:
                x = self.child(f"enc{i}")(x)
            except ShapeError as e:
                raise ShapeError(f"encoder stage {i}: {e}") from e
            features.append(x)
        return features

    def decode(self, features):
        """
        Run the decoder over the stage features

        Raises:
            ShapeError: if a skip feature does not match the decoder resolution
        """
        if len(features) != self.cfg.num_stages:
            raise ShapeError(f"expected {self.cfg.num_stages} stage features, got {len(features)}")
        x = features[-1]
        for name, _, _, skip in self.plan:
            if skip is not None:
                f = features[skip - 1]
                if f.shape[0] != x.shape[0] or f.shape[2:] != x.shape[2:]:
                    raise ShapeError(f"{name}: skip f{skip} {f.shape} does not match decoder input {x.shape}")
                x = concat([x, f], axis=1)
            x = self.child(name)(x)
        return x

    def forward(self, x):
        return self.decode(self.encode(x))


class SegmentationHead(Module):
    """Conv 3x3x3 + BN + GELU, then the 1x1x1 classifier"""

    def __init__(self, channels, num_classes, rng):
        super().__init__()
        self.num_classes = num_classes
        self.fuse = ConvBnAct(channels, channels, rng, kernel=3, act="gelu")
        self.classifier = Conv3d(Conv3dSpec(channels, num_classes, kernel=1), rng)

    def forward(self, x):
        return self.classifier(self.fuse(x))


class PretrainHead(Module):
    """
    Per-slice pseudo-label classifier

    A ladder of 1x1x1 Conv+BN+GELU units interleaved with axis permutes that
    moves, in turn, the clusterer axis, the class axis, a collapsed row axis
    and finally the slice axis into the channel position. For a fused feature
    map (b, F, S, H, W) the output is (b, S, clusterers, max K) logits.
    """

    def __init__(self, channels, spatial, cluster_sizes, rng):
        super().__init__()
        s, h, w = (int(n) for n in spatial)
        self.channels = channels
        self.spatial = (s, h, w)
        self.cluster_sizes = tuple(int(k) for k in cluster_sizes)
        self.clusterers = len(self.cluster_sizes)
        self.classes = max(self.cluster_sizes)
        reduced = max(h // 16, 1)
        self.cluster1 = ConvBnAct(channels, self.clusterers, rng, kernel=1, act="gelu")
        self.cluster2 = ConvBnAct(self.clusterers, self.clusterers, rng, kernel=1, act="gelu")
        self.class1 = ConvBnAct(w, self.classes, rng, kernel=1, act="gelu")
        self.class2 = ConvBnAct(self.classes, self.classes, rng, kernel=1, act="gelu")
        self.row1 = ConvBnAct(h, reduced, rng, kernel=1, act="gelu")
        self.row2 = ConvBnAct(reduced, 1, rng, kernel=1, act="gelu")
        self.slice1 = ConvBnAct(s, s, rng, kernel=1, act="gelu")
        self.slice2 = Conv3d(Conv3dSpec(s, s, kernel=1), rng)

    @staticmethod
    def _expect(stage, x, channels):
        if x.shape[1] != channels:
            raise ShapeError(f"pretrain head stage '{stage}': expected {channels} channels, got {x.shape}")

    def forward(self, features):
        s, h, w = self.spatial
        if features.ndim != 5 or features.shape[1:] != (self.channels, s, h, w):
            raise ShapeError(f"pretrain head stage 'input': expected (b, {self.channels}, {s}, {h}, {w}), "
                             f"got {features.shape}")
        b = features.shape[0]
        x = features.permute(0, 1, 3, 4, 2)
        x = self.cluster2(self.cluster1(x))
        x = x.permute(0, 3, 2, 1, 4)
        self._expect("class", x, w)
        x = self.class2(self.class1(x))
        x = x.permute(0, 2, 1, 3, 4)
        self._expect("row", x, h)
        x = self.row2(self.row1(x))
        x = x.permute(0, 4, 3, 2, 1)
        self._expect("slice", x, s)
        x = ops.relu(self.slice2(self.slice1(x)))
        return x.reshape(b, s, self.clusterers, self.classes)


@dataclass(frozen=True)
class PartitionIndex:
    """Grid geometry needed to rebuild a cube from its sub-cubes"""
    batch: int
    grid: int
    edge: int

    @property
    def count(self):
        return self.grid ** 3

    @property
    def extent(self):
        return self.grid * self.edge


def cube_root(n):
    """Integer cube root of a positive perfect cube"""
    root = round(n ** (1 / 3)) if n > 0 else 0
    if n < 1 or root ** 3 != n:
        raise PartitionError(f"N={n} is not a positive perfect cube")
    return root


def partition_index(shape, n_parts):
    """
    Validate a cube shape against N sub-cubes

    Raises:
        PartitionError: for non-cube inputs, non-cube N or indivisible extents
    """
    grid = cube_root(n_parts)
    if len(shape) != 5:
        raise PartitionError(f"expected a (b, C, S, H, W) volume, got {tuple(shape)}")
    s, h, w = shape[2:]
    if not s == h == w:
        raise PartitionError(f"spatial extents {shape[2:]} are not a cube")
    if s % grid:
        raise PartitionError(f"extent {s} is not divisible by {grid} (N={n_parts})")
    return PartitionIndex(shape[0], grid, s // grid)


def fold_cubes(x, index):
    """(b, C, nB, nB, nB) -> (b*N, C, B, B, B), sub-cubes row-major over the grid"""
    b, c = x.shape[:2]
    n, e = index.grid, index.edge
    x = x.reshape(b, c, n, e, n, e, n, e).permute(0, 2, 4, 6, 1, 3, 5, 7)
    return x.reshape(b * index.count, c, e, e, e)


def unfold_cubes(y, index):
    """Inverse of fold_cubes; the channel count may differ from the input's"""
    n, e = index.grid, index.edge
    if y.ndim != 5 or y.shape[0] != index.batch * index.count or y.shape[2:] != (e, e, e):
        raise PartitionError(f"folded cubes {y.shape} do not match {index}")
    c = y.shape[1]
    y = y.reshape(index.batch, n, n, n, c, e, e, e).permute(0, 4, 1, 5, 2, 6, 3, 7)
    return y.reshape(index.batch, c, index.extent, index.extent, index.extent)


def partition_cube(x, n_parts):
    """
    Split a cube into N sub-cubes of edge B = cbrt(S*H*W / N)

    Returns:
        (list of N tensors (b, C, B, B, B) in row-major grid order, PartitionIndex)
    """
    index = partition_index(x.shape, n_parts)
    b, c = x.shape[:2]
    e = index.edge
    folded = fold_cubes(x, index).reshape(b, index.count, c, e, e, e)
    return [folded[:, i] for i in range(index.count)], index


def reassemble(cubes, index):
    """
    Rebuild the volume from partition_cube's sub-cubes

    Raises:
        PartitionError: if the cubes are inconsistent with the index
    """
    cubes = list(cubes)
    e = index.edge
    if len(cubes) != index.count:
        raise PartitionError(f"expected {index.count} sub-cubes, got {len(cubes)}")
    channels = cubes[0].shape[1] if cubes[0].ndim == 5 else None
    for i, cube in enumerate(cubes):
        if cube.shape != (index.batch, channels, e, e, e):
            raise PartitionError(f"sub-cube {i} has shape {cube.shape}, expected "
                                 f"{(index.batch, channels, e, e, e)}")
    stacked = concat([cube.reshape(index.batch, 1, channels, e, e, e) for cube in cubes], axis=1)
    return unfold_cubes(stacked.reshape(index.batch * index.count, channels, e, e, e), index)


class LoGoNet(Module):
    """
    Dual-path segmentation network

    head(global(x) + reassemble(local(sub-cubes))). With a shared local path
    the sub-cubes are folded into the batch axis and run in one call, so in
    train mode the local batch norms pool their statistics over all N cubes;
    unshared paths (share_local=False) normalize each cube on its own.
    """

    def __init__(self, cfg: LoGoNetConfig, rng):
        super().__init__()
        self.cfg = cfg
        global_rng, local_rng, head_rng = split_rng(rng, 3)
        self.add_module("global", Ulkanet(cfg.global_cfg, global_rng))
        if cfg.share_local:
            self.add_module("local", Ulkanet(cfg.local_cfg, local_rng))
        else:
            for i, stream in enumerate(split_rng(local_rng, cfg.partitions_n)):
                self.add_module(f"local{i}", Ulkanet(cfg.local_cfg, stream))
        self.head = SegmentationHead(cfg.fusion_channels, cfg.num_classes, head_rng)

    @property
    def global_path(self):
        return self.child("global")

    def local_paths(self):
        if self.cfg.share_local:
            return [self.child("local")]
        return [self.child(f"local{i}") for i in range(self.cfg.partitions_n)]

    def check_input(self, x):
        multiple = self.cfg.required_multiple
        if x.ndim != 5 or x.shape[1] != self.cfg.global_cfg.in_channels:
            raise ShapeError(f"expected input (b, {self.cfg.global_cfg.in_channels}, S, H, W), got {x.shape}")
        if any(n % multiple for n in x.shape[2:]):
            raise ShapeError(f"input extents {x.shape[2:]} must be divisible by {multiple}")

    def local_features(self, x):
        """Local path output, reassembled to the full cube"""
        index = partition_index(x.shape, self.cfg.partitions_n)
        if self.cfg.share_local:
            return unfold_cubes(self.child("local")(fold_cubes(x, index)), index)
        cubes, index = partition_cube(x, self.cfg.partitions_n)
        return reassemble([path(cube) for path, cube in zip(self.local_paths(), cubes)], index)

    def fusion(self, x):
        """
        Returns:
            (global_out, local_out, fused) before the head
        """
        self.check_input(x)
        global_out = self.global_path(x)
        local_out = self.local_features(x)
        if global_out.shape != local_out.shape:
            raise ShapeError(f"global path {global_out.shape} and local path {local_out.shape} disagree")
        return global_out, local_out, global_out + local_out

    def features(self, x):
        return self.fusion(x)[2]

    def forward(self, x):
        return self.head(self.features(x))


class UlkanetSegmenter(Module):
    """Single-path baseline: global ULKANet plus the same segmentation head"""

    def __init__(self, cfg: LoGoNetConfig, rng):
        super().__init__()
        self.cfg = cfg
        global_rng, _, head_rng = split_rng(rng, 3)
        self.add_module("global", Ulkanet(cfg.global_cfg, global_rng))
        self.head = SegmentationHead(cfg.fusion_channels, cfg.num_classes, head_rng)

    @property
    def global_path(self):
        return self.child("global")

    def features(self, x):
        return self.global_path(x)

    def forward(self, x):
        return self.head(self.features(x))


def build_model(cfg: LoGoNetConfig, seed, single_path=False):
    """Construct a freshly initialized model from a seed"""
    rng = make_rng(seed, INIT_STREAM)
    if single_path:
        return UlkanetSegmenter(cfg, rng)
    return LoGoNet(cfg, rng)


def predict_segmentation(logits):
    """
    Per-voxel argmax over the class axis; ties go to the smaller class index

    Args:
        logits: Tensor or array (b, classes, S, H, W)

    Returns:
        int64 array (b, S, H, W)
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data is None or data.ndim != 5:
        raise ShapeError(f"expected logits (b, classes, S, H, W), got {getattr(logits, 'shape', None)}")
    return np.argmax(data, axis=1).astype(np.int64)
