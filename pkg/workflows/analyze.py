"""
Cost analysis workflow
Counts parameters and MACs of the configured model and prints them next to
the published reference values
"""

import logging
from pathlib import Path

from config import PUBLISHED_REFERENCE_GFLOPS, PUBLISHED_REFERENCE_PARAMS_M, config_digest
from utils.flops import count_model
from workflows.common import prepare_run

logger = logging.getLogger(__name__)

REFERENCE = {"gflops": PUBLISHED_REFERENCE_GFLOPS, "params_m": PUBLISHED_REFERENCE_PARAMS_M}


def run_analyze(cfg, input_shape, out_dir=None):
    """
    Build the configured model and walk it on a data-less input

    Args:
        cfg: RunConfig
        input_shape: (b, C, S, H, W)
        out_dir: If given, the per-op rows are written to cost_report.csv

    Returns:
        CostReport
    """
    model = prepare_run(cfg)
    report = count_model(model, input_shape, config_digest(cfg.model_config()), name=f"{cfg.architecture}-{cfg.variant}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.to_csv(out_dir / "cost_report.csv")
    return report


def reference_for(cfg):
    """Published reference values apply to the normal dual-path model only"""
    if cfg.variant == "normal" and cfg.architecture == "logonet":
        return REFERENCE
    return None
