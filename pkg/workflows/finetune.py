"""
Fine-tuning workflow
Supervised DiceCE training of the segmentation model from scratch or from a
pre-trained backbone, periodic Dice evaluation and paired run comparison
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from models import predict_segmentation
from seed_data import load_dataset
from utils.errors import FormatError
from utils.losses import DiceCeConfig, dice_ce_loss, mean_foreground_dice
from utils.optim import AdamW, cosine_warmup_lr
from utils.reports import loss_curve_figure, write_figure
from utils.storage import read_checkpoint, write_checkpoint, write_resolved_config
from utils.tensor import Tensor, get_dtype, make_rng, no_grad
from workflows.common import FINETUNE_STREAM, crop_size_for, load_backbone, prepare_run, random_crop, \
    run_step_entry

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "finetune.lgck"
LOG_NAME = "finetune_log.csv"


@dataclass
class FinetuneResult:
    """Artifacts of a fine-tuning run"""
    checkpoint: Path
    log: pd.DataFrame
    final_dice: float
    steps_to_threshold: int = None


def evaluate(model, pairs, num_classes):
    """Mean foreground Dice of whole-volume predictions in eval mode"""
    was_training = model.training
    model.eval()
    scores = []
    try:
        with no_grad():
            for image, labels in pairs:
                logits = model(Tensor(image[None].astype(get_dtype())))
                scores.append(mean_foreground_dice(predict_segmentation(logits)[0], labels, num_classes))
    finally:
        model.train(was_training)
    return float(np.mean(scores)) if scores else float("nan")


def run_finetune(cfg, data_dir, out_dir, init_ckpt=None, eval_dir=None, steps=None):
    """
    Fine-tune on labeled phantoms

    Args:
        cfg: RunConfig
        data_dir: Directory of image/label pairs used for training
        out_dir: Run directory
        init_ckpt: Optional checkpoint whose backbone initializes the model
        eval_dir: Held-out pairs for Dice (defaults to the training pairs)
        steps: Total steps (defaults to cfg.finetune_steps)

    Returns:
        FinetuneResult
    """
    steps = cfg.finetune_steps if steps is None else steps
    out_dir = Path(out_dir)
    model = prepare_run(cfg)
    pairs = load_dataset(data_dir)
    if not pairs:
        raise FormatError(data_dir, "no labeled volumes to fine-tune on")
    eval_pairs = load_dataset(eval_dir) if eval_dir is not None else pairs
    write_resolved_config(cfg, out_dir)

    if init_ckpt is not None:
        load_backbone(model, read_checkpoint(init_ckpt))

    loss_cfg = DiceCeConfig(cfg.w_dl, cfg.w_cl, cfg.dice_eps, cfg.include_background)
    edge = crop_size_for(cfg, pairs[0][0].shape[1:], model.cfg.required_multiple)
    optimizer = AdamW(model.named_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                      weight_decay=cfg.weight_decay,
                      schedule=lambda t: cosine_warmup_lr(t, cfg.warmup_steps, steps, cfg.lr))

    rows = []
    reached = None
    for step in tqdm(range(1, steps + 1), desc="finetune", disable=not cfg.progress):
        rng = make_rng(cfg.seed, FINETUNE_STREAM, step)
        chosen = np.sort(rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=False))
        images, targets = [], []
        for index in chosen:
            image, labels, _ = random_crop(pairs[index][0], pairs[index][1], edge, rng)
            images.append(image)
            targets.append(labels)
        model.train()
        loss = dice_ce_loss(model(Tensor(np.stack(images).astype(get_dtype()))), np.stack(targets), loss_cfg)
        optimizer.zero_grad()
        loss.backward()
        lr = optimizer.step()
        row = {"step": step, "loss": loss.item(), "lr": lr, "dice": np.nan}
        if step % cfg.eval_every == 0 or step == steps:
            row["dice"] = evaluate(model, eval_pairs, cfg.num_classes)
            if reached is None and row["dice"] >= cfg.dice_threshold:
                reached = step
            logger.info("finetune step %d/%d loss %.4f dice %.4f", step, steps, row["loss"], row["dice"])
        elif step % cfg.log_every == 0:
            logger.info("finetune step %d/%d loss %.4f", step, steps, row["loss"])
        rows.append(row)

    state = dict(model.state_dict())
    state.update(optimizer.state_dict())
    state.update(run_step_entry(steps))
    checkpoint = out_dir / CHECKPOINT_NAME
    write_checkpoint(checkpoint, state)

    log = pd.DataFrame(rows, columns=["step", "loss", "lr", "dice"])
    log.to_csv(out_dir / LOG_NAME, index=False)
    if len(log):
        write_figure(loss_curve_figure(log, "Fine-tuning loss and Dice"), out_dir / "loss_curve.html")
    final = float(log["dice"].dropna().iloc[-1]) if log["dice"].notna().any() else float("nan")
    return FinetuneResult(checkpoint, log, final, reached)


def steps_to_threshold(log, threshold):
    """First evaluated step whose Dice reaches the threshold, or None"""
    hits = log[log["dice"] >= threshold]
    return int(hits["step"].iloc[0]) if len(hits) else None


def compare_runs(scratch_log, pretrained_log, threshold=0.80):
    """
    Merge a from-scratch and a pre-trained fine-tuning log

    Returns:
        (table with step, dice_scratch, dice_pretrained; summary DataFrame of
         steps-to-threshold and final Dice per arm)
    """
    left = scratch_log[["step", "dice"]].dropna().rename(columns={"dice": "dice_scratch"})
    right = pretrained_log[["step", "dice"]].dropna().rename(columns={"dice": "dice_pretrained"})
    table = left.merge(right, on="step", how="outer").sort_values("step").reset_index(drop=True)
    summary = pd.DataFrame([
        {"arm": "scratch", "steps_to_threshold": steps_to_threshold(scratch_log, threshold),
         "final_dice": left["dice_scratch"].iloc[-1] if len(left) else np.nan},
        {"arm": "pretrained", "steps_to_threshold": steps_to_threshold(pretrained_log, threshold),
         "final_dice": right["dice_pretrained"].iloc[-1] if len(right) else np.nan},
    ])
    return table, summary
