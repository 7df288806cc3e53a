"""
Inference workflow
Loads a checkpoint, segments one LGV1 volume and writes the label volume
"""

import logging
from pathlib import Path

import numpy as np

from models import predict_segmentation
from utils.storage import read_checkpoint, read_volume, write_volume
from utils.tensor import Tensor, get_dtype, no_grad
from workflows.common import load_backbone, prepare_run

logger = logging.getLogger(__name__)


def run_infer(cfg, ckpt, volume_path, out_path):
    """
    Segment a volume

    Args:
        cfg: RunConfig the checkpoint was trained with
        ckpt: LGCK checkpoint containing a segmentation head
        volume_path: LGV1 image (C, S, H, W)
        out_path: LGV1 u8 label volume to write

    Returns:
        Label array (S, H, W)

    Raises:
        FormatError: unreadable or malformed inputs
        ShapeError: extents not divisible by the model's required multiple
        CheckpointMismatchError: checkpoint does not fit the configured model
    """
    model = prepare_run(cfg)
    load_backbone(model, read_checkpoint(ckpt), keep_head=True)
    volume = read_volume(volume_path).astype(get_dtype())
    model.eval()
    with no_grad():
        labels = predict_segmentation(model(Tensor(volume[None])))[0]
    write_volume(Path(out_path), labels[None].astype(np.uint8), "u8")
    logger.info("segmented %s -> %s (%s)", volume_path, out_path, np.bincount(labels.ravel()).tolist())
    return labels
