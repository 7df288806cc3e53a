"""
Configuration file for the LoGoNet toolkit
Contains the published pre-training / fine-tuning constants, the model
variant presets and the run configuration loaded from YAML or JSON
"""

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass

import yaml

from utils.blocks import LkaKernels
from utils.errors import ConfigError

# Get the directory where this config file is located
BASE_DIR = os.path.dirname(os.path.abspath(__file__))

APP_TITLE = "LoGoNet desk toolkit"

# Reference values reported for the normal model on 96^3 inputs
PUBLISHED_REFERENCE_GFLOPS = 246.96
PUBLISHED_REFERENCE_PARAMS_M = 67.5
FLOPS_PER_MAC = 2

# Published pre-training constants (desk defaults below are smaller)
PUBLISHED_K_RANGE = (80, 500)
PUBLISHED_CLUSTERERS_N = 80
PUBLISHED_PRETRAIN_EPOCHS = 100
PUBLISHED_FINETUNE_EPOCHS = 5000
PUBLISHED_CROP_SIZE = 96

VARIANTS = ("tiny", "normal", "large")
PRECISION_NAMES = ("train", "test", "float32", "float64")
UPSAMPLE_MODES = ("trilinear", "nearest")
ARCHITECTURES = ("logonet", "ulkanet")


@dataclass(frozen=True)
class UlkanetConfig:
    """Architecture of one U-shaped LKA feature extractor"""
    stage_depths: tuple
    dims: tuple
    mlp_ratios: tuple
    patch_kernels: tuple
    patch_strides: tuple
    out_channels: int = 64
    in_channels: int = 1
    decoder_channels: tuple = None
    lka: LkaKernels = LkaKernels()
    upsample_mode: str = "trilinear"

    def __post_init__(self):
        n = len(self.dims)
        for name in ("stage_depths", "mlp_ratios", "patch_kernels", "patch_strides"):
            if len(getattr(self, name)) != n:
                raise ConfigError(name, f"expected {n} entries to match dims {self.dims}")
        if any(s != 2 for s in self.patch_strides[1:]):
            raise ConfigError("patch_strides", "every stage after the first must downsample by 2")
        first = self.patch_strides[0]
        if first < 2 or first & (first - 1):
            raise ConfigError("patch_strides", f"first stride must be a power of two >= 2, got {first}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError("upsample_mode", f"expected one of {UPSAMPLE_MODES}")
        if self.decoder_channels is not None and len(self.decoder_channels) != self.num_decoder_blocks:
            raise ConfigError("decoder_channels", f"expected {self.num_decoder_blocks} entries")

    @property
    def num_stages(self):
        return len(self.dims)

    @property
    def num_decoder_blocks(self):
        return self.num_stages + int(math.log2(self.patch_strides[0])) - 1

    @property
    def required_multiple(self):
        """Input extents must be divisible by the product of the stage strides"""
        return math.prod(self.patch_strides)

    def decoder_plan(self):
        """
        Decoder blocks in execution order

        Returns:
            List of (name, in_channels, out_channels, skip_stage or None); the
            first block consumes the deepest feature, the last emits out_channels
        """
        n = self.num_stages
        widths = list(self.decoder_channels) if self.decoder_channels is not None else \
            [self.dims[i] // 2 for i in range(n - 1, -1, -1)] + \
            [self.out_channels] * (self.num_decoder_blocks - n)
        widths[-1] = self.out_channels
        plan = [(f"dec{n}", self.dims[n - 1], widths[0], None)]
        previous = widths[0]
        for position, stage in enumerate(range(n - 1, 0, -1), start=1):
            plan.append((f"dec{stage}", previous + self.dims[stage - 1], widths[position], stage))
            previous = widths[position]
        for extra in range(1, self.num_decoder_blocks - n + 1):
            plan.append((f"final{extra}", previous, widths[n - 1 + extra], None))
            previous = widths[n - 1 + extra]
        return plan


@dataclass(frozen=True)
class LoGoNetConfig:
    """Dual-path model: global ULKANet + local ULKANet over N sub-cubes"""
    global_cfg: UlkanetConfig
    local_cfg: UlkanetConfig
    partitions_n: int = 8
    num_classes: int = 14
    share_local: bool = True

    def __post_init__(self):
        if self.global_cfg.out_channels != self.local_cfg.out_channels:
            raise ConfigError("local_cfg", "global and local paths must emit the same channel count")
        if self.partitions_n < 1 or round(self.partitions_n ** (1 / 3)) ** 3 != self.partitions_n:
            raise ConfigError("partitions_n", f"{self.partitions_n} is not a perfect cube")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "need background plus at least one class")

    @property
    def fusion_channels(self):
        return self.global_cfg.out_channels

    @property
    def grid(self):
        return round(self.partitions_n ** (1 / 3))

    @property
    def required_multiple(self):
        return math.lcm(self.global_cfg.required_multiple, self.grid * self.local_cfg.required_multiple)


def ulkanet_preset(variant, path="global", in_channels=1):
    """Architecture presets; 'normal' and 'large' follow the published stage tables"""
    if variant == "normal":
        if path == "local":
            return UlkanetConfig((3, 4), (64, 128), (8, 8), (7, 3), (4, 2), 64, in_channels)
        return UlkanetConfig((3, 4, 6, 3), (64, 128, 256, 512), (8, 8, 4, 4), (7, 3, 3, 3), (4, 2, 2, 2),
                             64, in_channels)
    if variant == "large":
        if path == "local":
            return UlkanetConfig((3, 3), (96, 192), (8, 8), (7, 3), (4, 2), 64, in_channels)
        return UlkanetConfig((3, 3, 24, 3), (96, 192, 384, 768), (8, 8, 4, 4), (7, 3, 3, 3), (4, 2, 2, 2),
                             64, in_channels)
    if variant == "tiny":
        if path == "local":
            return UlkanetConfig((1, 1), (16, 32), (4, 4), (3, 3), (2, 2), 16, in_channels)
        return UlkanetConfig((1, 1, 2, 1), (16, 32, 48, 64), (4, 4, 4, 4), (3, 3, 3, 3), (2, 2, 2, 2),
                             16, in_channels)
    raise ConfigError("variant", f"unknown variant '{variant}', expected one of {VARIANTS}")


@dataclass
class RunConfig:
    """
    Every knob of a run; defaults are the published values where one exists,
    desk-scale values for the clusterer ensemble and the model variant
    """
    variant: str = "tiny"
    seed: int = 0
    precision: str = "train"
    in_channels: int = 1
    num_classes: int = 14
    partitions_n: int = 8
    share_local: bool = True
    architecture: str = "logonet"

    # intensity range scaling
    a_min: float = -1000.0
    a_max: float = 1000.0
    b_min: float = 0.0
    b_max: float = 1.0
    clip: bool = True

    # masking and pseudo-labels
    phi1: float = 0.1
    phi2: float = 0.7
    mask_length: int = 5
    patch_sizes: tuple = (1, 2, 4, 8, 16, 32, 96)
    mask_fill: float = 0.0
    tau: float = 0.1
    clusterers_n: int = 4
    k_min: int = 8
    k_max: int = 32
    kmeans_iterations: int = 350
    kmeans_subset: float = 0.1
    pretrain_steps: int = 200

    # optimization
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 10
    finetune_steps: int = 500
    batch_size: int = 1
    crop_size: int = PUBLISHED_CROP_SIZE

    # DiceCE loss
    w_dl: float = 1.0
    w_cl: float = 1.0
    dice_eps: float = 1e-5
    include_background: bool = True

    # reporting
    eval_every: int = 50
    log_every: int = 10
    progress: bool = True
    dice_threshold: float = 0.80

    def __post_init__(self):
        self.patch_sizes = tuple(int(p) for p in self.patch_sizes)
        self.validate()

    def validate(self):
        """Raise ConfigError naming the first invalid field"""
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"expected one of {VARIANTS}, got '{self.variant}'")
        if self.precision not in PRECISION_NAMES:
            raise ConfigError("precision", f"expected one of {PRECISION_NAMES}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError("architecture", f"expected one of {ARCHITECTURES}")
        for name in ("phi1", "phi2", "kmeans_subset"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(name, f"must lie in [0, 1], got {value}")
        if self.kmeans_subset == 0.0:
            raise ConfigError("kmeans_subset", "must be positive")
        if self.mask_length < 1:
            raise ConfigError("mask_length", "must be >= 1")
        if not self.patch_sizes or min(self.patch_sizes) < 1:
            raise ConfigError("patch_sizes", "need at least one positive patch size")
        if self.tau <= 0:
            raise ConfigError("tau", "must be positive")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError("k_min", f"need 1 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.clusterers_n < 1:
            raise ConfigError("clusterers_n", "must be >= 1")
        if self.w_dl < 0 or self.w_cl < 0 or self.w_dl + self.w_cl <= 0:
            raise ConfigError("w_dl", "loss weights must be non-negative with a positive sum")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if self.a_max <= self.a_min:
            raise ConfigError("a_max", "must exceed a_min")
        for name in ("batch_size", "crop_size", "eval_every", "log_every", "num_classes", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.partitions_n < 1 or round(self.partitions_n ** (1 / 3)) ** 3 != self.partitions_n:
            raise ConfigError("partitions_n", f"{self.partitions_n} is not a perfect cube")

    def model_config(self):
        """Build the LoGoNetConfig of this run"""
        return LoGoNetConfig(
            global_cfg=ulkanet_preset(self.variant, "global", self.in_channels),
            local_cfg=ulkanet_preset(self.variant, "local", self.in_channels),
            partitions_n=self.partitions_n,
            num_classes=self.num_classes,
            share_local=self.share_local,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        data = dataclasses.asdict(self)
        data["patch_sizes"] = list(self.patch_sizes)
        return data


def published_scale_config(**overrides):
    """Run configuration with the published ensemble and crop constants"""
    values = dict(
        variant="normal",
        clusterers_n=PUBLISHED_CLUSTERERS_N,
        k_min=PUBLISHED_K_RANGE[0],
        k_max=PUBLISHED_K_RANGE[1],
        crop_size=PUBLISHED_CROP_SIZE,
    )
    values.update(overrides)
    return RunConfig(**values)


def load_config(path=None, **overrides):
    """
    Load a RunConfig from YAML or JSON, filling defaults

    Args:
        path: Config file path or None for pure defaults
        **overrides: Values applied after the file (e.g. --seed from the CLI)

    Returns:
        RunConfig

    Raises:
        ConfigError: unknown key, unreadable file or invalid value
    """
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                text = handle.read()
        except OSError as e:
            raise ConfigError("--config", f"cannot read {path}: {e}") from e
        try:
            values = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (ValueError, yaml.YAMLError) as e:
            raise ConfigError("--config", f"cannot parse {path}: {e}") from e
        values = values or {}
        if not isinstance(values, dict):
            raise ConfigError("--config", "top level must be a mapping")
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in values:
        if key not in known:
            raise ConfigError(key, "unknown field")
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError("--config", str(e)) from e


def save_config(cfg, path):
    """Write the fully-resolved configuration as YAML"""
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(cfg.to_dict(), handle, sort_keys=False)


def config_digest(obj):
    """SHA-256 of the canonical JSON form of a config dataclass"""
    payload = json.dumps(dataclasses.asdict(obj), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()
