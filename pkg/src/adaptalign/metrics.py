"""PSNR, MS-SSIM, Bjontegaard delta rate and quality-fluctuation traces."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import PchipInterpolator

from .imageio import FrameLike, as_rgb_array

PSNR_CAP = 99.0
PEAK = 255.0

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

FRAME_CSV_FIELDS = ("frame_idx", "bits", "bpp", "psnr", "ms_ssim")
CURVE_CSV_FIELDS = ("label", "bpp", "quality")


def _pair(a: FrameLike, b: FrameLike) -> tuple[np.ndarray, np.ndarray]:
    x = as_rgb_array(a)
    y = as_rgb_array(b)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def mse_to_psnr(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PEAK * PEAK / mse))


def psnr(a: FrameLike, b: FrameLike) -> float:
    """PSNR in dB with the MSE pooled over every sample; identical inputs give 99 dB."""
    x, y = _pair(a, b)
    d = x - y
    return mse_to_psnr(float(np.mean(d * d)))


# ---------------------------------------------------------------------------
# MS-SSIM
# ---------------------------------------------------------------------------


def _gaussian(size: int, sigma: float) -> np.ndarray:
    k = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    half = len(win) // 2
    out = ndimage.correlate1d(img, win, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, win, axis=1, mode="reflect")
    if half:
        out = out[half:-half, half:-half]
    return out


def _ssim_terms(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> tuple[float, float]:
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    mx = _filter_valid(x, win)
    my = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    cs_map = (2.0 * sxy + c2) / (sxx + syy + c2)
    lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs_map)), float(np.mean(cs_map))


def _ms_ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    min_dim = min(x.shape)
    size = SSIM_WINDOW
    if min_dim < size:
        size = min_dim if min_dim % 2 else min_dim - 1
        scales = 1
    else:
        scales = 1
        while scales < len(MS_SSIM_WEIGHTS) and min_dim >= SSIM_WINDOW * 2**scales:
            scales += 1
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    win = _gaussian(size, SSIM_SIGMA)
    score = 1.0
    for j in range(scales):
        ssim_val, cs_val = _ssim_terms(x, y, win)
        term = ssim_val if j == scales - 1 else cs_val
        score *= max(term, 0.0) ** weights[j]
        if j < scales - 1:
            h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
            x = 0.25 * (x[0:h:2, 0:w:2] + x[1:h:2, 0:w:2] + x[0:h:2, 1:w:2] + x[1:h:2, 1:w:2])
            y = 0.25 * (y[0:h:2, 0:w:2] + y[1:h:2, 0:w:2] + y[0:h:2, 1:w:2] + y[1:h:2, 1:w:2])
    return float(score)


def ms_ssim(a: FrameLike, b: FrameLike) -> float:
    """5-scale MS-SSIM per RGB channel, averaged.

    Inputs narrower than 176 px use as many scales as fit an 11-tap window at
    the coarsest scale, with the leading weights renormalised.
    """
    x, y = _pair(a, b)
    return float(np.mean([_ms_ssim_plane(x[c], y[c]) for c in range(x.shape[0])]))


# ---------------------------------------------------------------------------
# rate-distortion curves and BD-rate
# ---------------------------------------------------------------------------


@dataclass
class RDPoint:
    bpp: float
    quality: float
    label: str = ""

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")


@dataclass
class RDCurve:
    points: list[RDPoint] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        bpp = [p.bpp for p in self.points]
        q = [p.quality for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(bpp, bpp[1:])):
            raise ValueError(f"curve {self.label!r}: bpp values must be distinct")
        if any(q2 < q1 for q1, q2 in zip(q, q[1:])):
            raise ValueError(f"curve {self.label!r}: quality must not drop as rate grows")

    @classmethod
    def from_arrays(cls, bpp: Sequence[float], quality: Sequence[float], label: str = "") -> "RDCurve":
        return cls([RDPoint(float(b), float(q), label) for b, q in zip(bpp, quality)], label)

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def quality(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])

    def __len__(self) -> int:
        return len(self.points)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average bitrate difference of ``test`` against ``anchor`` at equal quality, in percent.

    log(rate) is interpolated as a monotone piecewise cubic Hermite function of
    quality and integrated exactly over the shared quality interval. Negative
    means ``test`` needs fewer bits.
    """
    for c in (anchor, test):
        if len(c) < 4:
            raise ValueError(f"curve {c.label!r} has {len(c)} points; BD-rate needs at least 4")
        q = c.quality
        if np.any(np.diff(q) <= 0):
            raise ValueError(f"curve {c.label!r}: quality must be strictly increasing")
    qa, qt = anchor.quality, test.quality
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise ValueError(
            f"no quality overlap between {anchor.label!r} [{qa.min():.4f}, {qa.max():.4f}] "
            f"and {test.label!r} [{qt.min():.4f}, {qt.max():.4f}]"
        )
    ia = PchipInterpolator(qa, np.log(anchor.bpp)).integrate(lo, hi)
    it = PchipInterpolator(qt, np.log(test.bpp)).integrate(lo, hi)
    avg = (it - ia) / (hi - lo)
    return float((np.exp(avg) - 1.0) * 100.0)


def format_bd_table(results: dict, datasets: Optional[Sequence[str]] = None, title: str = "PSNR") -> str:
    """Method rows by dataset columns plus an AVG column, values in percent."""
    if datasets is None:
        datasets = []
        for row in results.values():
            for d in row:
                if d not in datasets:
                    datasets.append(d)
    head = f"{'Method':<16s}" + "".join(f"{d:>10s}" for d in datasets) + f"{'AVG':>10s}"
    lines = [f"BD-rate (%) {title}", head]
    for method, row in results.items():
        vals = [row.get(d, float("nan")) for d in datasets]
        finite = [v for v in vals if np.isfinite(v)]
        avg = float(np.mean(finite)) if finite else float("nan")
        lines.append(f"{method:<16s}" + "".join(f"{v:>10.2f}" for v in vals) + f"{avg:>10.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# fluctuation
# ---------------------------------------------------------------------------


@dataclass
class GopStats:
    gop: int
    start: int
    end: int
    min: float
    max: float
    mean: float
    std: float


@dataclass
class FluctuationTrace:
    frames: list[tuple[int, int, float]]
    gops: list[GopStats]

    def frame_rows(self) -> list[dict]:
        return [{"frame_idx": i, "gop": g, "psnr": q} for i, g, q in self.frames]

    def gop_rows(self) -> list[dict]:
        return [vars(s).copy() for s in self.gops]


def fluctuation_trace(per_frame_psnr: Sequence[float], gop: int = 32) -> FluctuationTrace:
    """Per-frame series with GOP membership and per-GOP min/max/mean/std (population)."""
    if len(per_frame_psnr) < 1:
        raise ValueError("empty trace")
    if gop < 1:
        raise ValueError("gop must be >= 1")
    values = np.asarray(per_frame_psnr, dtype=np.float64)
    frames = [(i, i // gop, float(v)) for i, v in enumerate(values)]
    gops = []
    for g, start in enumerate(range(0, len(values), gop)):
        chunk = values[start : start + gop]
        gops.append(
            GopStats(
                g,
                start,
                start + len(chunk) - 1,
                float(chunk.min()),
                float(chunk.max()),
                float(chunk.mean()),
                float(chunk.std()),
            )
        )
    return FluctuationTrace(frames, gops)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_csv(path: str, rows: Iterable[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_frame_csv(path: str) -> list[dict]:
    """Per-frame rows; every base column must be present and numeric."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in FRAME_CSV_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for lineno, raw in enumerate(reader, start=2):
            try:
                row = dict(raw)
                row["frame_idx"] = int(raw["frame_idx"])
                for k in ("bits", "bpp", "psnr", "ms_ssim"):
                    row[k] = float(raw[k])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
            rows.append(row)
    return rows


def write_curve_csv(path: str, curves: Iterable[RDCurve]) -> None:
    rows = [
        {"label": c.label or p.label, "bpp": p.bpp, "quality": p.quality}
        for c in curves
        for p in c.points
    ]
    write_csv(path, rows, CURVE_CSV_FIELDS)


def read_curve_csv(path: str) -> dict[str, RDCurve]:
    """Group ``(label, bpp, quality)`` rows into curves, keeping first-seen label order."""
    grouped: dict[str, list[RDPoint]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in CURVE_CSV_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for lineno, raw in enumerate(reader, start=2):
            try:
                label = raw["label"]
                if label is None:
                    raise ValueError("missing label")
                point = RDPoint(float(raw["bpp"]), float(raw["quality"]), label)
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
            grouped.setdefault(label, []).append(point)
    return {label: RDCurve(points, label) for label, points in grouped.items()}
