"""
Shared workflow helpers
Seed stream keys, model construction from a run config, crops, and
checkpoint splitting between backbone, pre-training head, optimizer and
run counters
"""

import logging

import numpy as np

from models import build_model
from utils.errors import CheckpointMismatchError, FormatError
from utils.tensor import set_precision

logger = logging.getLogger(__name__)

# Stream keys of make_rng(seed, key, ...) used by the workflows
MASK_STREAM = 2
CLUSTER_STREAM = 3
FINETUNE_STREAM = 4
HEAD_STREAM = 5

HEAD_PREFIX = "pretrain_head"
OPTIM_PREFIX = "optim"
RUN_STEP = "run.step"


def prepare_run(cfg):
    """Apply the run's precision and build its model"""
    set_precision(cfg.precision)
    return build_model(cfg.model_config(), cfg.seed, single_path=cfg.architecture == "ulkanet")


def crop_size_for(cfg, extents, multiple):
    """
    Crop edge used for training

    The configured crop when the volume allows it, otherwise the largest
    multiple of the model's required multiple that fits the smallest extent.
    """
    edge = min(cfg.crop_size, min(extents))
    edge -= edge % multiple
    if edge < multiple:
        raise FormatError("<data>", f"volume extents {tuple(extents)} are smaller than the required "
                                    f"multiple {multiple}")
    return edge


def random_crop(volume, labels, edge, rng):
    """
    Cube crop of edge `edge` at a random offset

    Args:
        volume: (C, S, H, W); labels: (S, H, W) or None

    Returns:
        (volume crop, labels crop or None, slice offset)
    """
    s, h, w = volume.shape[1:]
    z, y, x = (int(rng.integers(0, n - edge + 1)) for n in (s, h, w))
    window = (slice(z, z + edge), slice(y, y + edge), slice(x, x + edge))
    crop = volume[(slice(None),) + window]
    return crop, (labels[window] if labels is not None else None), z


def split_state(state):
    """Partition a checkpoint into (backbone, pre-training head, optimizer, run step)"""
    backbone, head, optim = {}, {}, {}
    step = 0
    for name, array in state.items():
        if name == RUN_STEP:
            step = int(np.asarray(array).reshape(-1)[0])
        elif name.startswith(HEAD_PREFIX + "."):
            head[name] = array
        elif name.startswith(OPTIM_PREFIX + "."):
            optim[name] = array
        else:
            backbone[name] = array
    return backbone, head, optim, step


def load_backbone(model, state, keep_head=False):
    """
    Load backbone parameters into a model

    With keep_head=False the segmentation head keeps its fresh initialization
    (a pre-training checkpoint carries no segmentation head).

    Raises:
        CheckpointMismatchError: listing missing or unexpected backbone paths
    """
    backbone, _, _, _ = split_state(state)
    own = model.state_dict()
    if not keep_head:
        backbone = {k: v for k, v in backbone.items() if not k.startswith("head.")}
        backbone.update({k: v for k, v in own.items() if k.startswith("head.")})
    unexpected = [k for k in backbone if k not in own]
    if unexpected:
        raise CheckpointMismatchError(unexpected=unexpected)
    model.load_state_dict(backbone)
    logger.info("loaded %d backbone arrays", len(backbone))


def run_step_entry(step):
    return {RUN_STEP: np.array([step], dtype=np.float64)}
