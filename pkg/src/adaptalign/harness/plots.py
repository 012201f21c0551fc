"""Rate-distortion and in-GOP fluctuation plots.

Output is a pure function of the input CSVs: the SVG hash salt is fixed and
the date metadata dropped, so regenerating gives byte-identical files.
"""

from __future__ import annotations

import csv
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..metrics import (  # noqa: E402
    CURVE_CSV_FIELDS,
    FRAME_CSV_FIELDS,
    RDCurve,
    RDPoint,
    fluctuation_trace,
    read_curve_csv,
    read_frame_csv,
    write_csv,
    write_curve_csv,
)
from .evaluate import summarize  # noqa: E402

SVG_SALT = "adaptalign"


def _header(path: str) -> list[str]:
    with open(path, newline="") as fh:
        return next(csv.reader(fh), [])


def _label_for(path: str) -> str:
    stem = os.path.splitext(os.path.basename(path))[0]
    if stem == "frames":
        parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
        return parent or stem
    return stem


def _save(fig, path: str) -> None:
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def collect(csv_paths: Sequence[str], metric: str = "psnr"):
    """Split inputs into RD curves and per-frame traces keyed by label."""
    curves: dict[str, list[RDPoint]] = {}
    traces: dict[str, list[dict]] = {}
    for path in csv_paths:
        head = _header(path)
        if all(f in head for f in FRAME_CSV_FIELDS):
            rows = read_frame_csv(path)
            label = _label_for(path)
            traces[label] = rows
            curves.setdefault(label, []).append(summarize(rows, metric, label))
        elif all(f in head for f in CURVE_CSV_FIELDS):
            for label, curve in read_curve_csv(path).items():
                curves.setdefault(label, []).extend(curve.points)
        else:
            raise ValueError(f"{path}: not a per-frame or curve CSV (header {head})")
    return {k: RDCurve(v, k) for k, v in curves.items()}, traces


def plot_rd(curves: dict[str, RDCurve], path: str, ylabel: str = "PSNR (dB)") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        if len(curve) == 1:
            ax.plot(curve.bpp, curve.quality, linestyle="none", marker="o", label=label)
        else:
            ax.plot(curve.bpp, curve.quality, marker="o", label=label)
    ax.set_xlabel("bpp")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_fluctuation(traces: dict[str, list[dict]], path: str, gop: int = 32) -> None:
    """Per-frame quality with GOP boundaries; intra copies are left out of the lines."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    n = 0
    for label, rows in traces.items():
        idx = np.array([r["frame_idx"] for r in rows], dtype=float)
        q = np.array([r["psnr"] for r in rows], dtype=float)
        intra = np.array([int(r.get("intra_copy") or 0) for r in rows], dtype=bool)
        q[intra] = np.nan
        ax.plot(idx, q, label=label, linewidth=1)
        n = max(n, len(rows))
    for b in range(0, n, gop):
        ax.axvline(b, color="0.6", linewidth=0.6, linestyle="--")
    ax.set_xlabel("frame")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def emit_plots(csv_paths: Sequence[str], out_dir: str, gop: int = 32, metric: str = "psnr") -> list[str]:
    """Write ``rd.svg``, ``rd_points.csv`` and, for per-frame inputs, ``fluctuation.svg``/``gop_stats.csv``."""
    if not csv_paths:
        raise ValueError("no CSV inputs")
    curves, traces = collect(csv_paths, metric)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    rd = os.path.join(out_dir, "rd.svg")
    plot_rd(curves, rd, "PSNR (dB)" if metric == "psnr" else "MS-SSIM")
    written.append(rd)
    pts = os.path.join(out_dir, "rd_points.csv")
    write_curve_csv(pts, curves.values())
    written.append(pts)
    if traces:
        fl = os.path.join(out_dir, "fluctuation.svg")
        plot_fluctuation(traces, fl, gop)
        written.append(fl)
        stats = []
        for label, rows in traces.items():
            q = [r["psnr"] for r in rows]
            for g in fluctuation_trace(q, gop).gops:
                # intra copies sit at the cap; summarise predicted frames only
                inter = [r["psnr"] for r in rows[g.start : g.end + 1] if not int(r.get("intra_copy") or 0)]
                if not inter:
                    continue
                stats.append(
                    {
                        "label": label,
                        "gop": g.gop,
                        "min": min(inter),
                        "max": max(inter),
                        "mean": float(np.mean(inter)),
                        "std": float(np.std(inter)),
                    }
                )
        gs = os.path.join(out_dir, "gop_stats.csv")
        write_csv(gs, stats, ("label", "gop", "min", "max", "mean", "std"))
        written.append(gs)
    return written
