"""Six-way component ablation (alignment stage, quality-aware weights, scale search).

Each toggle is a pure config switch: the alignment stage off means contexts
come from the coarse warp alone, quality-aware weights off means the
finetune phase uses unit weights, and the scale search off means an
infinite gate threshold. Two checkpoints are trained (finetune with and
without the weights) and shared by the six evaluations.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Optional

from ..metrics import write_csv, write_curve_csv, RDCurve
from ..sme import ScaleSearchConfig
from .config import ExperimentConfig
from .evaluate import evaluate_sequence
from .train import train_toy

log = logging.getLogger(__name__)

# (tsmc, mrqa, sme)
ABLATION_MATRIX = {
    "Ma": (False, False, False),
    "Mb": (True, False, False),
    "Mc": (False, True, False),
    "Md": (False, False, True),
    "Me": (True, True, False),
    "Mf": (True, True, True),
}
SUMMARY_FIELDS = ("config", "tsmc", "mrqa", "sme", "bpp", "psnr", "ms_ssim", "rank")


@dataclass
class AblationRow:
    config: str
    tsmc: bool
    mrqa: bool
    sme: bool
    bpp: float
    psnr: float
    ms_ssim: float
    csv_path: str


def _sme_on(cfg: ExperimentConfig) -> ScaleSearchConfig:
    return cfg.sme if len(cfg.sme.scales) > 1 else ScaleSearchConfig.hevc_class_b()


def run_ablation(
    cfg: ExperimentConfig, out_dir: Optional[str] = None, checkpoints: Optional[dict] = None
) -> list[AblationRow]:
    """Train (unless ``checkpoints`` maps False/True to paths) and evaluate Ma..Mf."""
    out = out_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    if checkpoints is None:
        ft = cfg.train.finetune_steps or max(1, cfg.train.steps // 4)
        checkpoints = {}
        for flag in (False, True):
            tcfg = cfg.replace(train=dataclasses.replace(cfg.train, mrqa=flag, finetune_steps=ft))
            report = train_toy(tcfg, output_dir=os.path.join(out, "train_mrqa" if flag else "train_base"))
            log.info("trained mrqa=%s: %s", flag, report.summary())
            checkpoints[flag] = report.checkpoint

    rows = []
    for name, (tsmc, mrqa, sme) in ABLATION_MATRIX.items():
        ecfg = cfg.replace(tsmc=tsmc, sme=_sme_on(cfg) if sme else ScaleSearchConfig.disabled())
        res = evaluate_sequence(ecfg, checkpoints[mrqa], output_dir=os.path.join(out, name), label=name)
        inter = [r for r in res.rows if not r["intra_copy"]] or res.rows
        ms = sum(r["ms_ssim"] for r in inter) / len(inter)
        rows.append(AblationRow(name, tsmc, mrqa, sme, res.point.bpp, sum(r["psnr"] for r in inter) / len(inter), ms, res.csv_path))

    order = sorted(rows, key=lambda r: -r.psnr)
    rank = {r.config: i + 1 for i, r in enumerate(order)}
    write_csv(
        os.path.join(out, "summary.csv"),
        [dict(dataclasses.asdict(r), rank=rank[r.config]) for r in rows],
        SUMMARY_FIELDS,
    )
    write_curve_csv(os.path.join(out, "points.csv"), [RDCurve.from_arrays([r.bpp], [r.psnr], r.config) for r in rows])
    return rows


def format_ordering(rows: list[AblationRow]) -> str:
    order = sorted(rows, key=lambda r: -r.psnr)
    return " > ".join(f"{r.config} ({r.psnr:.3f} dB)" for r in order)
