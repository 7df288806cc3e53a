"""
Command-line entry point for the LoGoNet desk toolkit
Generates phantoms, pre-trains, fine-tunes, segments and counts model cost
"""

import argparse
import logging
import sys
from pathlib import Path

from config import APP_TITLE, VARIANTS, load_config
from seed_data import generate_phantoms
from utils.errors import EXIT_OK, ArgumentError, exit_on_error
from utils.reports import banner
from workflows.ablations import ABLATIONS, run_ablation, run_pretrain_comparison
from workflows.analyze import reference_for, run_analyze
from workflows.finetune import run_finetune
from workflows.infer import run_infer
from workflows.pretrain import run_pretrain

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = "0,1,2"


def parse_ints(text, name, count=None):
    """Parse a comma-separated list of integers such as '1,1,96,96,96'"""
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ArgumentError(f"{name}: expected comma-separated integers, got '{text}'") from e
    if count is not None and len(values) != count:
        raise ArgumentError(f"{name}: expected {count} values, got {len(values)}")
    return values


def run_config(args):
    """RunConfig from --config with --seed / --variant applied on top"""
    return load_config(args.config, seed=args.seed, variant=args.variant)


@exit_on_error
def cmd_gen_data(args):
    cfg = run_config(args)
    extents = parse_ints(args.extents, "--extents", 3)
    banner("LOGONET - PHANTOM GENERATION")
    manifest = generate_phantoms(Path(args.out), args.count, extents, cfg, cfg.seed)
    print(f"[OK] Wrote {args.count} phantoms of {extents} to {args.out}")
    if len(manifest):
        print(f"[OK] {len(manifest)} objects over {manifest['class_id'].nunique()} classes")
    return EXIT_OK


@exit_on_error
def cmd_pretrain(args):
    cfg = run_config(args)
    banner("LOGONET - MASKED PRE-TRAINING")
    result = run_pretrain(cfg, args.corpus, Path(args.out), steps=args.steps, resume=args.resume,
                          stop_after=args.stop_after)
    print(f"[OK] Clusterer sizes: {list(result.cluster_sizes)}")
    if len(result.log):
        print(f"[OK] Loss {result.log['loss'].iloc[0]:.4f} -> {result.log['loss'].iloc[-1]:.4f}")
    print(f"[OK] Checkpoint: {result.checkpoint}")
    return EXIT_OK


@exit_on_error
def cmd_finetune(args):
    cfg = run_config(args)
    banner("LOGONET - FINE-TUNING")
    result = run_finetune(cfg, args.data, Path(args.out), init_ckpt=args.init, eval_dir=args.eval_dir,
                          steps=args.steps)
    print(f"[OK] Final Dice: {result.final_dice:.4f}")
    if result.steps_to_threshold is not None:
        print(f"[OK] Dice {cfg.dice_threshold:.2f} reached at step {result.steps_to_threshold}")
    print(f"[OK] Checkpoint: {result.checkpoint}")
    return EXIT_OK


@exit_on_error
def cmd_infer(args):
    cfg = run_config(args)
    labels = run_infer(cfg, args.checkpoint, args.volume, args.out)
    print(f"[OK] Segmented {args.volume} {labels.shape} -> {args.out}")
    return EXIT_OK


@exit_on_error
def cmd_analyze(args):
    cfg = run_config(args)
    shape = parse_ints(args.shape, "--shape", 5) if args.shape else (1, cfg.in_channels, 96, 96, 96)
    report = run_analyze(cfg, shape, args.out)
    banner("LOGONET - COST REPORT")
    print(report.to_text(reference_for(cfg), depth=args.depth))
    return EXIT_OK


@exit_on_error
def cmd_ablate(args):
    cfg = run_config(args)
    banner(f"LOGONET - ABLATION {args.name}")
    table, _ = run_ablation(args.name, cfg, parse_ints(args.seeds, "--seeds"), args.train, args.eval,
                            Path(args.out), pretrain_steps=args.pretrain_steps, finetune_steps=args.finetune_steps)
    print(table.to_string(index=False))
    return EXIT_OK


@exit_on_error
def cmd_compare(args):
    cfg = run_config(args)
    banner("LOGONET - PRE-TRAINING EFFECT")
    table = run_pretrain_comparison(cfg, parse_ints(args.seeds, "--seeds"), args.train, args.eval, Path(args.out),
                                    pretrain_steps=args.pretrain_steps, finetune_steps=args.finetune_steps)
    print(table.to_string(index=False))
    print(f"\n[OK] Pre-trained not slower on {int(table['pretrained_not_slower'].sum())}/{len(table)} seeds")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--variant", choices=VARIANTS, help="overrides the config model variant")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress at INFO level")

    parser = argparse.ArgumentParser(prog="logonet", description=APP_TITLE)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic CT phantoms")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--extents", default="16,16,16", help="S,H,W")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="masked pre-training with pseudo-labels")
    p.add_argument("corpus", help="directory of phantom volumes")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--steps", type=int, help="overrides pretrain_steps")
    p.add_argument("--resume", help="checkpoint of an interrupted run")
    p.add_argument("--stop-after", type=int, help="stop after this step, keeping the full schedule")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="supervised DiceCE fine-tuning")
    p.add_argument("data", help="directory of labeled phantoms")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--init", help="pre-trained checkpoint whose backbone initializes the model")
    p.add_argument("--eval-dir", help="held-out labeled phantoms")
    p.add_argument("--steps", type=int, help="overrides finetune_steps")
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("infer", parents=[common], help="segment one volume")
    p.add_argument("checkpoint")
    p.add_argument("volume")
    p.add_argument("--out", required=True, help="label volume to write")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("analyze-flops", parents=[common], help="count parameters and MACs")
    p.add_argument("--shape", help="b,C,S,H,W (default 1,C,96,96,96)")
    p.add_argument("--out", help="directory for cost_report.csv")
    p.add_argument("--depth", type=int, default=2, help="layer path depth of the summary")
    p.set_defaults(handler=cmd_analyze)

    for name, handler, text in (("ablate", cmd_ablate, "paired ablation over seeds"),
                                ("compare", cmd_compare, "from-scratch vs pre-trained fine-tuning")):
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "ablate":
            p.add_argument("name", choices=ABLATIONS)
        p.add_argument("train", help="labeled training phantoms")
        p.add_argument("eval", help="held-out labeled phantoms")
        p.add_argument("--out", required=True, help="results directory")
        p.add_argument("--seeds", default=DEFAULT_SEEDS)
        p.add_argument("--pretrain-steps", type=int)
        p.add_argument("--finetune-steps", type=int)
        p.set_defaults(handler=handler)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
