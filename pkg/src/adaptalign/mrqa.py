"""Quality-aware per-frame training weights.

Each P-frame's loss weight is a 7-frame hierarchical base pattern modulated
by how much the frame's quality moved relative to its predecessor. A frame
that got better than the previous one is weighted down; a drop in the
previous step weights the current frame up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

BASE_WEIGHTS = (1.8, 0.6, 0.8, 0.6, 1.4, 0.6, 0.8)
PSNR_LAMBDAS = (2048.0, 1024.0, 512.0, 256.0)
MSSSIM_LAMBDAS = (64.0, 32.0, 16.0, 8.0)


@dataclass
class MrqaState:
    lam: float
    lambda_max: float
    base_weights: tuple = BASE_WEIGHTS
    prev_delta_q: float = 0.0

    def __post_init__(self):
        self.base_weights = tuple(float(w) for w in self.base_weights)
        if len(self.base_weights) == 0:
            raise ValueError("base weight vector is empty")
        if not (self.lambda_max > 0 and 0 < self.lam <= self.lambda_max):
            raise ValueError(f"need 0 < lambda <= lambda_max, got {self.lam}, {self.lambda_max}")

    @classmethod
    def for_metric(cls, lam: float, metric: str = "psnr", **kw) -> "MrqaState":
        """λ_max is the largest rate point of the metric's λ set."""
        lambdas = {"psnr": PSNR_LAMBDAS, "ms_ssim": MSSSIM_LAMBDAS}[metric.lower().replace("-", "_")]
        return cls(lam, max(lambdas), **kw)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def delta_q(psnr_t: float, psnr_prev: float) -> float:
    return psnr_t - psnr_prev


def modulated_weight(idx: int, dq_t: float, dq_prev: float, state: MrqaState) -> float:
    """base[idx mod P] * (1 - λσ(dq_t)/λ_max + λσ(dq_prev)/λ_max)."""
    if idx < 0:
        raise ValueError(f"frame index must be non-negative, got {idx}")
    base = state.base_weights[idx % len(state.base_weights)]
    # difference first so equal arguments cancel exactly
    mod = (state.lam * sigmoid(dq_prev) - state.lam * sigmoid(dq_t)) / state.lambda_max
    return base * (1.0 + mod)


def schedule_rollout(psnr_trace: Sequence[float], state: MrqaState) -> list[float]:
    """Weights for frames 1..N-1 of a rollout; ``state.prev_delta_q`` is threaded through."""
    trace = [float(p) for p in psnr_trace]
    if len(trace) < 2:
        raise ValueError("PSNR trace needs at least two frames")
    weights = []
    for idx in range(len(trace) - 1):
        dq = delta_q(trace[idx + 1], trace[idx])
        weights.append(modulated_weight(idx, dq, state.prev_delta_q, state))
        state.prev_delta_q = dq
    return weights


def weight_bounds(idx: int, state: MrqaState) -> tuple[float, float]:
    base = state.base_weights[idx % len(state.base_weights)]
    r = state.lam / state.lambda_max
    return base * (1.0 - r), base * (1.0 + r)


def schedule_table(psnr_trace: Sequence[float], state: MrqaState) -> list[dict]:
    """Rows for the weight-schedule CSV."""
    trace = np.asarray(psnr_trace, dtype=float)
    weights = schedule_rollout(trace, state)
    return [
        {"frame_idx": i + 1, "psnr": trace[i + 1], "delta_q": trace[i + 1] - trace[i], "weight": w}
        for i, w in enumerate(weights)
    ]
