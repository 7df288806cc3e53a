"""
Segmentation losses and metrics
Dice loss, cross-entropy, their weighted DiceCE combination and the Dice
overlap metric used for evaluation
"""

from dataclasses import dataclass

import numpy as np

from utils import ops
from utils.errors import ArgumentError, ShapeError
from utils.tensor import Tensor

DICE_EPS = 1e-5
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class DiceCeConfig:
    """Weights of DiceCELoss = w_dl * Dice + w_cl * CE"""
    w_dl: float = 1.0
    w_cl: float = 1.0
    eps: float = DICE_EPS
    include_background: bool = True

    def __post_init__(self):
        if self.w_dl < 0 or self.w_cl < 0 or self.w_dl + self.w_cl <= 0:
            raise ArgumentError(f"loss weights must be non-negative with a positive sum, "
                                f"got w_dl={self.w_dl}, w_cl={self.w_cl}")
        if self.eps <= 0:
            raise ArgumentError(f"eps must be positive, got {self.eps}")


def _as_tensor(values, like):
    if isinstance(values, Tensor):
        return values
    return Tensor(np.asarray(values, dtype=like.dtype))


def one_hot(labels, num_classes, dtype=np.float64):
    """
    (b, S, H, W) integer labels -> (b, classes, S, H, W) one-hot

    Raises:
        ArgumentError: if a label is outside [0, num_classes)
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ArgumentError(f"labels must lie in [0, {num_classes}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    encoded = np.eye(num_classes, dtype=dtype)[labels.astype(np.int64)]
    return np.ascontiguousarray(np.moveaxis(encoded, -1, 1))


def dice_loss(probs, targets, eps=DICE_EPS, include_background=True):
    """
    1 - (2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps), per class and sample

    Args:
        probs: Tensor (b, classes, ...)
        targets: One-hot array or Tensor of the same shape
        include_background: Average over class 0 too

    Returns:
        Scalar Tensor, the mean over classes and batch
    """
    targets = _as_tensor(targets, probs)
    if probs.shape != targets.shape:
        raise ShapeError(f"dice_loss: probabilities {probs.shape} and targets {targets.shape} differ")
    axes = tuple(range(2, probs.ndim))
    intersection = (probs * targets).sum(axis=axes)
    denominator = probs.sum(axis=axes) + targets.sum(axis=axes) + eps
    ratio = (intersection * 2.0 + eps) / denominator
    if not include_background:
        if probs.shape[1] < 2:
            raise ArgumentError("excluding the background needs at least two classes")
        ratio = ratio[:, 1:]
    return 1.0 - ratio.mean()


def ce_loss(probs, targets, floor=LOG_FLOOR):
    """Mean over voxels of -sum_c t_c * log(p_c), log clamped at floor"""
    targets = _as_tensor(targets, probs)
    if probs.shape != targets.shape:
        raise ShapeError(f"ce_loss: probabilities {probs.shape} and targets {targets.shape} differ")
    return -((targets * probs.log(floor)).sum(axis=1).mean())


def dice_ce_loss(logits, labels, cfg=None):
    """
    Weighted Dice + cross-entropy on logits

    Args:
        logits: Tensor (b, classes, S, H, W)
        labels: Integer array (b, S, H, W)
        cfg: DiceCeConfig (defaults 1, 1)

    Returns:
        Scalar Tensor
    """
    cfg = cfg or DiceCeConfig()
    labels = np.asarray(labels)
    if logits.ndim != 5 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    targets = Tensor(one_hot(labels, logits.shape[1], dtype=logits.dtype))
    probs = ops.softmax(logits, axis=1)
    loss = None
    if cfg.w_dl:
        loss = dice_loss(probs, targets, cfg.eps, cfg.include_background) * cfg.w_dl
    if cfg.w_cl:
        term = ce_loss(probs, targets) * cfg.w_cl
        loss = term if loss is None else loss + term
    return loss


def dice_metric(pred_labels, true_labels, class_id):
    """
    2|P n T| / (|P| + |T|) for one class; 1.0 when both are empty

    Args:
        pred_labels: Integer volume
        true_labels: Integer volume of the same shape
        class_id: Class to score
    """
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise ShapeError(f"dice_metric: shapes {pred_labels.shape} and {true_labels.shape} differ")
    p = pred_labels == class_id
    t = true_labels == class_id
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def mean_foreground_dice(pred_labels, true_labels, num_classes):
    """Mean Dice over classes 1..num_classes-1"""
    if num_classes < 2:
        raise ArgumentError("foreground Dice needs at least two classes")
    return float(np.mean([dice_metric(pred_labels, true_labels, c) for c in range(1, num_classes)]))
