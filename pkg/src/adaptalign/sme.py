"""Training-free adaptive-scale flow estimation.

Large displacements defeat a flow estimator with a limited search range.
Running the same estimator on downsampled frames shrinks the motion, so the
search below tries every candidate scale, upsamples each flow back to full
resolution, scores it by the PSNR of the warped reference, and keeps the
first scale that beats the running best by more than ``delta`` dB.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .flow import (
    DEFAULT_ESTIMATOR,
    FlowEstimator,
    FlowField,
    flow_magnitude,
    rescale_flow,
    resize_array,
    round_half_up,
    warp_array,
)
from .imageio import FrameLike, as_rgb_array
from .metrics import psnr

log = logging.getLogger(__name__)

FULL_SCALES = tuple(1.0 + 0.25 * i for i in range(17))
HEVC_B_SCALES = (1.0, 1.25)
HEVC_B_TAU = 10.0
DEFAULT_DELTA = 0.1


@dataclass(frozen=True)
class ScaleSearchConfig:
    scales: tuple = FULL_SCALES
    delta: float = DEFAULT_DELTA
    tau: float = HEVC_B_TAU
    evaluate_on: str = "RGB"

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        if not scales:
            raise ValueError("scale set is empty")
        if scales[0] != 1.0:
            raise ValueError(f"scale set must start at 1, got {scales[0]}")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("scale set must be strictly increasing")
        if self.delta < 0 or self.tau < 0:
            raise ValueError("delta and tau must be non-negative")
        if self.evaluate_on != "RGB":
            raise ValueError("only RGB evaluation is supported")

    @classmethod
    def hevc_class_b(cls) -> "ScaleSearchConfig":
        """Restricted search used for 1080p content: tau 10 px, scales {1, 1.25}."""
        return cls(scales=HEVC_B_SCALES, delta=DEFAULT_DELTA, tau=HEVC_B_TAU)

    @classmethod
    def disabled(cls) -> "ScaleSearchConfig":
        return cls(scales=(1.0,), tau=math.inf)


@dataclass
class ScaleEntry:
    scale: float
    width: int
    height: int
    psnr: Optional[float]
    skipped: bool = False
    note: str = ""


@dataclass
class ScaleSearchResult:
    best_scale: float
    best_psnr: float
    flow: FlowField
    report: list[ScaleEntry] = field(default_factory=list)

    def csv_rows(self) -> list[dict]:
        return [
            {
                "scale": e.scale,
                "width": e.width,
                "height": e.height,
                "psnr": "" if e.psnr is None else e.psnr,
                "selected": int(e.scale == self.best_scale),
                "note": e.note,
            }
            for e in self.report
        ]


@dataclass
class GatedFlow:
    flow: FlowField
    magnitude: float
    search: Optional[ScaleSearchResult] = None

    @property
    def scale(self) -> float:
        return self.search.best_scale if self.search is not None else 1.0


def scaled_size(width: int, height: int, scale: float) -> tuple[int, int]:
    return max(1, round_half_up(width / scale)), max(1, round_half_up(height / scale))


def _min_size(estimator) -> int:
    fn = getattr(estimator, "min_size", None)
    return fn() if callable(fn) else 1


def flow_at_scale(
    cur: np.ndarray, ref: np.ndarray, scale: float, estimator: FlowEstimator = DEFAULT_ESTIMATOR
) -> FlowField:
    """Estimate on frames downsampled by ``scale`` and return the flow at full resolution."""
    h, w = cur.shape[-2:]
    if scale == 1.0:
        return estimator(cur, ref)
    size = scaled_size(w, h, scale)
    small = estimator(resize_array(cur, size), resize_array(ref, size))
    return rescale_flow(small, size=(w, h))


def _score_scale(cur, ref, scale, estimator, scale1_flow) -> ScaleEntry:
    h, w = cur.shape[-2:]
    sw, sh = scaled_size(w, h, scale)
    if min(sw, sh) < _min_size(estimator):
        return ScaleEntry(scale, sw, sh, None, True, f"{sw}x{sh} below estimator minimum")
    if scale == 1.0 and scale1_flow is not None:
        flow = scale1_flow
    else:
        flow = flow_at_scale(cur, ref, scale, estimator)
    return ScaleEntry(scale, sw, sh, psnr(cur, warp_array(ref, flow)))


def select_scale(
    cur: FrameLike,
    ref: FrameLike,
    cfg: ScaleSearchConfig = ScaleSearchConfig(),
    estimator: FlowEstimator = DEFAULT_ESTIMATOR,
    workers: int = 1,
    scale1_flow: Optional[FlowField] = None,
) -> ScaleSearchResult:
    """Search the candidate downsampling scales and return the winning flow.

    Scores may be computed concurrently (``workers > 1``); the selection
    always folds over them in the configured order, so ties resolve the same
    way as a sequential run.
    """
    cur_a = as_rgb_array(cur)
    ref_a = as_rgb_array(ref)
    if cur_a.shape != ref_a.shape:
        raise ValueError(f"frame sizes differ: {cur_a.shape} vs {ref_a.shape}")

    def score(scale):
        return _score_scale(cur_a, ref_a, scale, estimator, scale1_flow)

    if workers > 1 and len(cfg.scales) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            report = list(pool.map(score, cfg.scales))
    else:
        report = [score(s) for s in cfg.scales]

    best_psnr, best_scale = 0.0, 1.0
    for entry in report:
        if entry.skipped:
            log.warning("scale %.2f skipped: %s", entry.scale, entry.note)
            continue
        if entry.psnr > best_psnr + cfg.delta:
            best_psnr, best_scale = entry.psnr, entry.scale

    if best_scale == 1.0 and scale1_flow is not None:
        flow = scale1_flow
    else:
        flow = flow_at_scale(cur_a, ref_a, best_scale, estimator)
    return ScaleSearchResult(best_scale, best_psnr, flow, report)


def gated_flow(
    cur: FrameLike,
    ref: FrameLike,
    cfg: ScaleSearchConfig = ScaleSearchConfig(),
    estimator: FlowEstimator = DEFAULT_ESTIMATOR,
    workers: int = 1,
) -> GatedFlow:
    """Estimate at full scale; run the scale search only if the RMS flow exceeds ``tau``."""
    cur_a = as_rgb_array(cur)
    ref_a = as_rgb_array(ref)
    flow = estimator(cur_a, ref_a)
    magnitude = flow_magnitude(flow)
    if magnitude <= cfg.tau:
        return GatedFlow(flow, magnitude, None)
    result = select_scale(cur_a, ref_a, cfg, estimator, workers, scale1_flow=flow)
    return GatedFlow(result.flow, magnitude, result)
