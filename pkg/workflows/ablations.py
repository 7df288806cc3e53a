"""
Ablation harness
Runs paired arms that differ in exactly one configuration field over several
seeds and tabulates held-out Dice per arm
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from utils.errors import ArgumentError
from utils.reports import ablation_figure, write_figure
from workflows.finetune import compare_runs, run_finetune, steps_to_threshold
from workflows.pretrain import run_pretrain

logger = logging.getLogger(__name__)

ABLATIONS = ("mask_onoff", "clusterer_sweep", "loss_weights", "logo_vs_ulka")

# Config fields each ablation is allowed to vary between its arms
FACTORS = {
    "mask_onoff": ("phi2",),
    "clusterer_sweep": ("clusterers_n",),
    "loss_weights": ("w_dl", "w_cl"),
    "logo_vs_ulka": ("architecture",),
}

CLUSTERER_COUNTS = (1, 4, 8)
LOSS_WEIGHTS = ((1.0, 0.0), (0.0, 1.0), (0.5, 1.0), (1.0, 0.5), (1.0, 1.0))


@dataclass
class AblationResult:
    """Held-out Dice of one arm over its seeds"""
    arm: str
    dice: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.dice)) if self.dice else float("nan")

    @property
    def std(self):
        return float(np.std(self.dice, ddof=1)) if len(self.dice) > 1 else 0.0


@dataclass
class AblationArm:
    """One arm: its configuration and whether it pre-trains first"""
    name: str
    cfg: object
    pretrain: bool


def config_diff(a, b):
    """Names of the RunConfig fields whose values differ"""
    return sorted(f.name for f in dataclasses.fields(a) if getattr(a, f.name) != getattr(b, f.name))


def ablation_arms(name, cfg):
    """
    Arms of an ablation

    Raises:
        ArgumentError: unknown ablation name
    """
    if name == "mask_onoff":
        return [AblationArm("masking (phi2=0.7)", cfg.replace(phi2=0.7), True),
                AblationArm("no masking (phi2=0)", cfg.replace(phi2=0.0), True)]
    if name == "clusterer_sweep":
        return [AblationArm(f"{n} clusterers", cfg.replace(clusterers_n=n), True) for n in CLUSTERER_COUNTS]
    if name == "loss_weights":
        return [AblationArm(f"w_dl={w_dl} w_cl={w_cl}", cfg.replace(w_dl=w_dl, w_cl=w_cl), False)
                for w_dl, w_cl in LOSS_WEIGHTS]
    if name == "logo_vs_ulka":
        return [AblationArm("LoGoNet", cfg.replace(architecture="logonet"), False),
                AblationArm("ULKANet", cfg.replace(architecture="ulkanet"), False)]
    raise ArgumentError(f"unknown ablation '{name}', expected one of {ABLATIONS}")


def check_pairing(name, arms):
    """Every pair of arms must differ, and only in the ablation's single factor"""
    factor = set(FACTORS[name])
    for i, a in enumerate(arms):
        for b in arms[i + 1:]:
            diff = config_diff(a.cfg, b.cfg)
            if not diff or not set(diff) <= factor:
                raise ArgumentError(f"arms '{a.name}' and '{b.name}' differ in {diff}, expected only {sorted(factor)}")


def run_ablation(name, cfg, seeds, train_dir, eval_dir, out_dir, pretrain_steps=None, finetune_steps=None):
    """
    Run every arm of an ablation for every seed

    Args:
        name: One of ABLATIONS
        cfg: Base RunConfig
        seeds: At least two seeds
        train_dir: Labeled phantoms (also the pre-training corpus)
        eval_dir: Held-out labeled phantoms
        out_dir: Results directory

    Returns:
        (table DataFrame with arm, seeds, dice per seed, mean, std; list of AblationResult)
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ArgumentError("an ablation needs at least two seeds")
    arms = ablation_arms(name, cfg)
    check_pairing(name, arms)
    out_dir = Path(out_dir) / name
    results = []
    for arm in arms:
        result = AblationResult(arm.name)
        for seed in seeds:
            run_cfg = arm.cfg.replace(seed=seed)
            run_dir = out_dir / arm.name.replace(" ", "_").replace("=", "") / f"seed_{seed}"
            init = None
            if arm.pretrain:
                init = run_pretrain(run_cfg, train_dir, run_dir / "pretrain", steps=pretrain_steps).checkpoint
            finetuned = run_finetune(run_cfg, train_dir, run_dir / "finetune", init_ckpt=init, eval_dir=eval_dir,
                                     steps=finetune_steps)
            result.dice.append(finetuned.final_dice)
            logger.info("%s / %s / seed %d: dice %.4f", name, arm.name, seed, finetuned.final_dice)
        results.append(result)

    table = pd.DataFrame([{
        "arm": r.arm,
        "seeds": " ".join(map(str, seeds)),
        "dice": " ".join(f"{d:.4f}" for d in r.dice),
        "mean": r.mean,
        "std": r.std,
    } for r in results])
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "results.csv", index=False)
    write_figure(ablation_figure(table, f"Ablation: {name}"), out_dir / "ablation.html")
    return table, results


def run_pretrain_comparison(cfg, seeds, train_dir, eval_dir, out_dir, pretrain_steps=None, finetune_steps=None):
    """
    Paired from-scratch vs pre-trained fine-tuning per seed

    Returns:
        DataFrame with one row per seed: steps to cfg.dice_threshold for both
        arms, their final Dice and whether the pre-trained arm was not slower
    """
    out_dir = Path(out_dir) / "pretrain_effect"
    rows = []
    for seed in seeds:
        run_cfg = cfg.replace(seed=int(seed))
        run_dir = out_dir / f"seed_{seed}"
        scratch = run_finetune(run_cfg, train_dir, run_dir / "scratch", eval_dir=eval_dir, steps=finetune_steps)
        pretrained = run_pretrain(run_cfg, train_dir, run_dir / "pretrain", steps=pretrain_steps)
        tuned = run_finetune(run_cfg, train_dir, run_dir / "pretrained", init_ckpt=pretrained.checkpoint,
                             eval_dir=eval_dir, steps=finetune_steps)
        table, _ = compare_runs(scratch.log, tuned.log, cfg.dice_threshold)
        table.to_csv(run_dir / "comparison.csv", index=False)
        scratch_steps = steps_to_threshold(scratch.log, cfg.dice_threshold)
        pretrained_steps = steps_to_threshold(tuned.log, cfg.dice_threshold)
        rows.append({
            "seed": int(seed),
            "scratch_steps": scratch_steps,
            "pretrained_steps": pretrained_steps,
            "scratch_dice": scratch.final_dice,
            "pretrained_dice": tuned.final_dice,
            "pretrained_not_slower": pretrained_steps is not None and (
                scratch_steps is None or pretrained_steps <= scratch_steps),
        })
    result = pd.DataFrame(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.to_csv(out_dir / "pretrain_effect.csv", index=False)
    return result
