"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (bad files, shapes,
malformed CSV, training divergence).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from ..flow import LucasKanade, flow_magnitude, write_flow
from ..imageio import pad_to_multiple, read_png
from ..metrics import bd_rate, mse_to_psnr, read_curve_csv, write_csv
from ..mrqa import BASE_WEIGHTS, MrqaState, schedule_table
from ..numerics import default_dtype, no_grad
from ..sme import ScaleSearchConfig, gated_flow, select_scale
from ..tsmc import build_feature_pyramid, tsmc_forward
from .ablation import format_ordering, run_ablation
from .config import ExperimentConfig, load_config
from .evaluate import EVAL_DTYPE, evaluate_sequence, load_model
from .manifest import write_manifest
from .plots import emit_plots
from .selftest import all_passed, run_selftest
from .train import TrainingDiverged, train_toy

log = logging.getLogger("adaptalign")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (sectioned key = value)")
    common.add_argument("--out", help="output directory (default: config output_dir or ./adaptalign_out)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="adaptalign", description="Motion alignment toolkit: flow, scale search, alignment, weights and evaluation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("flow", parents=[common], help="estimate flow between two PNG frames")
    s.add_argument("--cur", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--levels", type=int, default=3)

    s = sub.add_parser("sme", parents=[common], help="run the scale search on two PNG frames")
    s.add_argument("--cur", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--tau", type=float, help="gate threshold in px (omit to always search)")
    s.add_argument("--scales", type=_floats, help="candidate scales, e.g. '1,1.25,1.5'")
    s.add_argument("--delta", type=float)
    s.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("align", parents=[common], help="align features and report per-level MSE/PSNR")
    s.add_argument("--cur", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--checkpoint")

    s = sub.add_parser("mrqa", parents=[common], help="weight schedule from a per-frame PSNR CSV")
    s.add_argument("--psnr", required=True, help="CSV with a 'psnr' column")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--lambda-max", type=float)
    s.add_argument("--base-weights", type=_floats)

    sub.add_parser("train", parents=[common], help="toy training of the alignment module")

    s = sub.add_parser("eval", parents=[common], help="GOP-structured evaluation of a sequence")
    s.add_argument("--checkpoint")
    s.add_argument("--dump", action="store_true", help="also write reconstructed frames as PNG")

    s = sub.add_parser("bdrate", parents=[common], help="BD-rate between two curve CSVs")
    s.add_argument("--anchor", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--anchor-label")
    s.add_argument("--test-label")

    s = sub.add_parser("plot", parents=[common], help="RD and fluctuation plots from CSVs")
    s.add_argument("--csv", nargs="+", required=True)
    s.add_argument("--gop", type=int)

    sub.add_parser("selftest", parents=[common], help="run the quick invariant suite")

    s = sub.add_parser("ablation", parents=[common], help="train and evaluate the six toggle configs")
    s.add_argument("--checkpoint-base")
    s.add_argument("--checkpoint-mrqa")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _frames(args):
    cur, ref = read_png(args.cur).to_array(), read_png(args.ref).to_array()
    if cur.shape != ref.shape:
        raise ValueError(f"frame sizes differ: {cur.shape[1:]} vs {ref.shape[1:]}")
    return cur, ref


def cmd_flow(args, cfg, out):
    cur, ref = _frames(args)
    flow = LucasKanade(levels=args.levels)(cur, ref)
    path = os.path.join(out, "flow.flo")
    write_flow(path, flow)
    print(f"flow {flow.width}x{flow.height}  rms magnitude {flow_magnitude(flow):.4f} px  -> {path}")
    return [path]


def cmd_sme(args, cfg, out):
    cur, ref = _frames(args)
    base = cfg.sme
    sc = ScaleSearchConfig(
        scales=args.scales or base.scales,
        delta=base.delta if args.delta is None else args.delta,
        tau=base.tau if args.tau is None else args.tau,
    )
    estimator = LucasKanade(levels=cfg.flow_levels)
    if args.tau is None and args.config is None:
        result, magnitude = select_scale(cur, ref, sc, estimator, args.workers), None
    else:
        gated = gated_flow(cur, ref, sc, estimator, args.workers)
        result, magnitude = gated.search, gated.magnitude
    written = []
    if result is None:
        print(f"rms magnitude {magnitude:.4f} px <= tau {sc.tau}: search not triggered, scale 1")
    else:
        path = os.path.join(out, "sme_report.csv")
        write_csv(path, result.csv_rows(), ("scale", "width", "height", "psnr", "selected", "note"))
        written.append(path)
        for e in result.report:
            mark = "*" if e.scale == result.best_scale else " "
            val = "skipped" if e.skipped else f"{e.psnr:.3f} dB"
            print(f"{mark} D={e.scale:<5g} {e.width}x{e.height}  {val}")
        print(f"best scale {result.best_scale:g} ({result.best_psnr:.3f} dB)")
    return written


def cmd_align(args, cfg, out):
    cur, ref = _frames(args)
    cur_p, _ = pad_to_multiple(cur, 16)
    ref_p, _ = pad_to_multiple(ref, 16)
    model = load_model(cfg, args.checkpoint)
    flow = LucasKanade(levels=cfg.flow_levels)(cur_p, ref_p)
    with default_dtype(EVAL_DTYPE), no_grad():
        res = tsmc_forward(ref_p, flow, model.params)
        target = build_feature_pyramid(cur_p, model.params)
    rows = []
    for s in range(3):
        t = target[s].data.astype(np.float64)
        a = np.mean((res.refined[s].data - t) ** 2)
        c = np.mean((res.coarse[s].data - t) ** 2)
        peak = float(np.abs(t).max()) or 1.0
        rows.append(
            {
                "level": s + 1,
                "aligned_mse": float(a),
                "coarse_mse": float(c),
                "aligned_psnr": mse_to_psnr(float(a) * (255.0 / peak) ** 2),
                "coarse_psnr": mse_to_psnr(float(c) * (255.0 / peak) ** 2),
            }
        )
        print(
            f"level {s + 1}: aligned MSE {a:.6g} ({rows[-1]['aligned_psnr']:.2f} dB)  "
            f"coarse MSE {c:.6g} ({rows[-1]['coarse_psnr']:.2f} dB)"
        )
    path = os.path.join(out, "align.csv")
    write_csv(path, rows, list(rows[0]))
    return [path]


def _read_psnr_column(path: str) -> list[float]:
    values = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if "psnr" not in (reader.fieldnames or []):
            raise ValueError(f"{path}: no 'psnr' column")
        for lineno, row in enumerate(reader, start=2):
            try:
                values.append(float(row["psnr"]))
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: malformed psnr value {row['psnr']!r}") from None
    return values


def cmd_mrqa(args, cfg, out):
    trace = _read_psnr_column(args.psnr)
    lam_max = args.lambda_max if args.lambda_max is not None else cfg.lambda_max
    lam = args.lam if args.lam is not None else min(cfg.lam, lam_max)
    state = MrqaState(lam, lam_max, args.base_weights or BASE_WEIGHTS)
    rows = schedule_table(trace, state)
    path = os.path.join(out, "weights.csv")
    write_csv(path, rows, ("frame_idx", "psnr", "delta_q", "weight"))
    print(" ".join(f"{r['weight']:.6g}" for r in rows))
    return [path]


def cmd_train(args, cfg, out):
    report = train_toy(cfg, output_dir=out)
    path = os.path.join(out, "train_report.json")
    with open(path, "w") as fh:
        json.dump(
            {
                "losses": report.losses,
                "phases": report.phases,
                "init_aligned_mse": report.init_aligned_mse,
                "aligned_mse": report.aligned_mse,
                "coarse_mse": report.coarse_mse,
                "ratio": report.ratio,
                "level_mse": report.level_mse,
            },
            fh,
        )
    print(report.summary())
    return [path, report.checkpoint]


def cmd_eval(args, cfg, out):
    res = evaluate_sequence(cfg, args.checkpoint, output_dir=out, dump_reconstructions=args.dump)
    print(
        f"{len(res.rows)} frames, internal {res.internal_size[0]}x{res.internal_size[1]}: "
        f"bpp {res.point.bpp:.6g}, {cfg.metric} {res.point.quality:.4f}"
    )
    return [res.csv_path]


def _pick(curves: dict, label: Optional[str], path: str):
    if label is not None:
        if label not in curves:
            raise ValueError(f"{path}: no curve labelled {label!r} (have {list(curves)})")
        return curves[label]
    if len(curves) != 1:
        raise ValueError(f"{path}: {len(curves)} curves; choose one with a label option")
    return next(iter(curves.values()))


def cmd_bdrate(args, cfg, out):
    anchor = _pick(read_curve_csv(args.anchor), args.anchor_label, args.anchor)
    test = _pick(read_curve_csv(args.test), args.test_label, args.test)
    value = bd_rate(anchor, test)
    print(f"BD-rate: {value:.2f}%")
    return []


def cmd_plot(args, cfg, out):
    written = emit_plots(args.csv, out, gop=args.gop or cfg.gop, metric=cfg.metric)
    for w in written:
        print(w)
    return written


def cmd_selftest(args, cfg, out):
    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if not all_passed(results):
        raise SelftestFailed("selftest failed")
    return []


def cmd_ablation(args, cfg, out):
    ckpts = None
    if args.checkpoint_base or args.checkpoint_mrqa:
        if not (args.checkpoint_base and args.checkpoint_mrqa):
            raise UsageError("give both --checkpoint-base and --checkpoint-mrqa, or neither")
        ckpts = {False: args.checkpoint_base, True: args.checkpoint_mrqa}
    rows = run_ablation(cfg, out, ckpts)
    for r in rows:
        print(f"{r.config}: tsmc={int(r.tsmc)} mrqa={int(r.mrqa)} sme={int(r.sme)}  bpp {r.bpp:.6g}  psnr {r.psnr:.4f}")
    print("ordering: " + format_ordering(rows))
    return [r.csv_path for r in rows] + [os.path.join(out, "summary.csv")]


class SelftestFailed(Exception):
    pass


COMMANDS = {
    "flow": cmd_flow,
    "sme": cmd_sme,
    "align": cmd_align,
    "mrqa": cmd_mrqa,
    "train": cmd_train,
    "eval": cmd_eval,
    "bdrate": cmd_bdrate,
    "plot": cmd_plot,
    "selftest": cmd_selftest,
    "ablation": cmd_ablation,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        out = args.out or (cfg.output_dir if args.config else "adaptalign_out")
        os.makedirs(out, exist_ok=True)
        written = COMMANDS[args.command](args, cfg, out)
        write_manifest(out, args.command, cfg, argv, [w for w in written if w])
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"adaptalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SelftestFailed, TrainingDiverged, ValueError, OSError, KeyError) as exc:
        print(f"adaptalign: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())
