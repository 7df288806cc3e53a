"""
Masked pre-training workflow
Trains the clusterer ensemble on unmasked slices, stores the pseudo-labels,
then optimizes the backbone and the pre-training head on masked crops
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from models import PretrainHead
from seed_data import load_dataset
from utils.errors import FormatError
from utils.optim import AdamW, cosine_warmup_lr
from utils.reports import loss_curve_figure, write_figure
from utils.ssl import assign_pseudo_labels, build_mask_plan, pretrain_step, slice_features, train_ensemble
from utils.storage import (read_checkpoint, read_pseudo_labels, write_checkpoint, write_pseudo_labels,
                           write_resolved_config)
from utils.tensor import make_rng
from workflows.common import (CLUSTER_STREAM, HEAD_PREFIX, HEAD_STREAM, MASK_STREAM, crop_size_for, prepare_run,
                              random_crop, run_step_entry, split_state)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "pretrain.lgck"
LABELS_NAME = "pseudo_labels.lgpl"
LOG_NAME = "pretrain_loss.csv"


@dataclass
class PretrainResult:
    """Artifacts of a pre-training run"""
    checkpoint: Path
    labels: Path
    log: pd.DataFrame
    cluster_sizes: tuple


def build_pseudo_labels(volumes, cfg):
    """Fit the clusterer ensemble on every slice and label the corpus"""
    vectors = np.concatenate([slice_features(v) for v in volumes])
    ensemble = train_ensemble(vectors, cfg.clusterers_n, cfg.k_min, cfg.k_max, cfg.kmeans_iterations,
                              cfg.kmeans_subset, make_rng(cfg.seed, CLUSTER_STREAM))
    return assign_pseudo_labels(ensemble, volumes)


def run_pretrain(cfg, corpus_dir, out_dir, steps=None, resume=None, stop_after=None):
    """
    Run masked pre-training

    Args:
        cfg: RunConfig
        corpus_dir: Directory of phantom image volumes
        out_dir: Run directory for checkpoint, pseudo-labels, loss log and config echo
        steps: Total steps (defaults to cfg.pretrain_steps)
        resume: Checkpoint written by an earlier run of the same config
        stop_after: Last step to run this time; the schedule still spans `steps`

    Returns:
        PretrainResult
    """
    steps = cfg.pretrain_steps if steps is None else steps
    last = steps if stop_after is None else min(stop_after, steps)
    out_dir = Path(out_dir)
    model = prepare_run(cfg)
    volumes = [image for image, _ in load_dataset(corpus_dir, with_labels=False)]
    if not volumes:
        raise FormatError(corpus_dir, "no volumes to pre-train on")
    write_resolved_config(cfg, out_dir)

    labels_path = out_dir / LABELS_NAME
    if resume is not None and labels_path.exists():
        labels = read_pseudo_labels(labels_path)
    else:
        labels = build_pseudo_labels(volumes, cfg)
        write_pseudo_labels(labels_path, labels)
    sizes = labels.cluster_sizes

    edge = crop_size_for(cfg, volumes[0].shape[1:], model.cfg.required_multiple)
    head = PretrainHead(cfg.model_config().fusion_channels, (edge, edge, edge), sizes,
                        make_rng(cfg.seed, HEAD_STREAM))
    named = list(model.named_parameters()) + list(head.named_parameters(HEAD_PREFIX))
    optimizer = AdamW(named, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                      weight_decay=cfg.weight_decay,
                      schedule=lambda t: cosine_warmup_lr(t, cfg.warmup_steps, steps, cfg.lr))

    start = 0
    rows = []
    if resume is not None:
        state = read_checkpoint(resume)
        backbone, head_state, optim_state, start = split_state(state)
        model.load_state_dict(backbone)
        head.load_state_dict(head_state, prefix=HEAD_PREFIX)
        optimizer.load_state_dict(optim_state)
        log_path = Path(resume).with_name(LOG_NAME)
        if log_path.exists():
            rows = pd.read_csv(log_path).query("step <= @start").to_dict("records")
        logger.info("resumed pre-training at step %d", start)

    progress = tqdm(range(start + 1, last + 1), desc="pretrain", disable=not cfg.progress)
    for step in progress:
        rng = make_rng(cfg.seed, MASK_STREAM, step)
        chosen = np.sort(rng.choice(len(volumes), size=min(cfg.batch_size, len(volumes)), replace=False))
        crops, plans, targets = [], [], []
        for index in chosen:
            crop, _, z = random_crop(volumes[index], None, edge, rng)
            crops.append(crop)
            plans.append(build_mask_plan(crop.shape, cfg.phi1, cfg.phi2, cfg.mask_length, cfg.patch_sizes, rng))
            targets.append(labels.for_volume(int(index))[z:z + edge])
        result = pretrain_step(model, head, np.stack(crops), plans, targets, optimizer, sizes, cfg.tau,
                               cfg.mask_fill, step=step)
        rows.append({
            "step": step,
            "loss": result.loss,
            "masked_slices": result.masked_slices,
            "loss_per_slice": result.loss / result.masked_slices if result.masked_slices else np.nan,
            "lr": optimizer.current_lr(step),
        })
        if step % cfg.log_every == 0:
            logger.info("pretrain step %d/%d loss %.4f (%d masked slices)", step, steps, result.loss,
                        result.masked_slices)

    state = dict(model.state_dict())
    state.update(head.state_dict(HEAD_PREFIX))
    state.update(optimizer.state_dict())
    state.update(run_step_entry(max(last, start)))
    checkpoint = out_dir / CHECKPOINT_NAME
    write_checkpoint(checkpoint, state)

    log = pd.DataFrame(rows, columns=["step", "loss", "masked_slices", "loss_per_slice", "lr"])
    log.to_csv(out_dir / LOG_NAME, index=False)
    if len(log):
        write_figure(loss_curve_figure(log, "Pre-training loss"), out_dir / "loss_curve.html")
    return PretrainResult(checkpoint, labels_path, log, sizes)
