"""Desk-scale training of the alignment module on synthetic random-affine clips.

The pool is a fixed, seeded set of short clips. Every step takes the
consecutive pairs of one clip as a batch, so a batch is also a rollout for
the quality-aware weights. The feature pyramid is frozen (its outputs serve
as the alignment targets), flows come from the Lucas-Kanade estimator and
are not trained, and parameters are updated by plain fixed-step gradient
descent.

Schedule: a motion phase trains the offset/mask branches, a context phase
trains the deformable conv and refinement blocks, and a final phase trains
both together with the reconstruction head. An optional finetune phase
applies the quality-aware weights.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..flow import LucasKanade, rescale_flow, warp_tensor
from ..imageio import SyntheticSequence
from ..metrics import mse_to_psnr
from ..mrqa import MrqaState, schedule_rollout
from ..numerics import Tensor, default_dtype, no_grad, ops
from ..tsmc import NUM_LEVELS, PyramidFeatures, build_feature_pyramid, deformable_align, predict_offsets_masks
from .config import ExperimentConfig
from .model import ToyModel

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3
TRAIN_DTYPE = np.float32
CHECKPOINT_NAME = "checkpoint.fgd"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Clip:
    ref: Tensor  # (B, 3, S, S) in [0, 1]
    cur: Tensor
    flows: list[Tensor]  # per level, (B, 2, S/2^s, S/2^s)
    ref_pyramid: PyramidFeatures
    cur_pyramid: PyramidFeatures


@dataclass
class TrainReport:
    losses: list[float]
    phases: list[str]
    init_aligned_mse: float
    aligned_mse: float
    coarse_mse: float
    checkpoint: Optional[str]
    wall_clock: float
    level_mse: list[tuple[float, float]] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.aligned_mse / self.coarse_mse

    def summary(self) -> str:
        return (
            f"steps={len(self.losses)} aligned_mse={self.aligned_mse:.6g} "
            f"coarse_mse={self.coarse_mse:.6g} ratio={self.ratio:.4f} "
            f"(init {self.init_aligned_mse:.6g}) wall={self.wall_clock:.1f}s"
        )


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def _clip_frames(cfg: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    t = cfg.train
    params = {
        "dx": rng.uniform(-t.max_shift, t.max_shift),
        "dy": rng.uniform(-t.max_shift, t.max_shift),
        "theta": rng.uniform(-t.max_rotation, t.max_rotation),
        "scale": 1.0 + rng.uniform(-t.max_zoom, t.max_zoom),
    }
    seq = SyntheticSequence("affine", t.size, t.size, t.batch + 1, params, seed=int(rng.integers(2**31)), tile=128)
    return np.stack([np.asarray(seq.frame(k).to_array()) for k in range(len(seq))])


def build_pool(cfg: ExperimentConfig, model: ToyModel) -> tuple[list[Clip], list[Clip]]:
    """Seeded training and held-out clips with flows and frozen pyramids precomputed."""
    rng = np.random.default_rng(cfg.seed)
    estimator = LucasKanade(levels=cfg.flow_levels)
    clips = []
    for _ in range(cfg.train.clips + cfg.train.holdout_clips):
        frames = _clip_frames(cfg, rng)
        ref, cur = frames[:-1], frames[1:]
        flows = [estimator(c, r) for c, r in zip(cur, ref)]
        per_level = [
            Tensor(np.stack([(f if s == 0 else rescale_flow(f, 0.5**s)).as_array() for f in flows]), dtype=TRAIN_DTYPE)
            for s in range(NUM_LEVELS)
        ]
        ref_t = Tensor(ref / 255.0, dtype=TRAIN_DTYPE)
        cur_t = Tensor(cur / 255.0, dtype=TRAIN_DTYPE)
        clips.append(
            Clip(
                ref_t,
                cur_t,
                per_level,
                build_feature_pyramid(ref_t, model.params).detach(),
                build_feature_pyramid(cur_t, model.params).detach(),
            )
        )
    return clips[: cfg.train.clips], clips[cfg.train.clips :]


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _weighted_mse(x: Tensor, target: np.ndarray, weights: Optional[Tensor]) -> Tensor:
    diff = ops.sub(x, target)
    sq = ops.mul(diff, diff)
    if weights is not None:
        sq = ops.mul(sq, weights)
    return ops.mean(sq)


def _aligned(model: ToyModel, clip: Clip):
    contexts, coarse = [], []
    for s, lp in enumerate(model.params.levels):
        feat, v = clip.ref_pyramid[s], clip.flows[s]
        om = predict_offsets_masks(feat, v, lp, s, model.params.groups)
        ctx = deformable_align(feat, om, lp, model.params.groups)
        for rb in lp.refine:
            ctx = rb(ctx)
        contexts.append(ctx)
        coarse.append(om.coarse)
    return contexts, coarse


def evaluate_alignment(model: ToyModel, clips: list[Clip]) -> tuple[float, float, list[tuple[float, float]]]:
    """Mean over clips and levels of (aligned MSE, coarse-warp MSE) against the current-frame pyramid."""
    per_level = np.zeros((NUM_LEVELS, 2))
    for clip in clips:
        with no_grad():
            contexts, _ = _aligned(model, clip)
            coarse_all = [warp_tensor(clip.ref_pyramid[s], clip.flows[s]).data for s in range(NUM_LEVELS)]
        for s in range(NUM_LEVELS):
            target = clip.cur_pyramid[s].data
            coarse = coarse_all[s]
            per_level[s, 0] += np.mean((contexts[s].data.astype(np.float64) - target) ** 2)
            per_level[s, 1] += np.mean((coarse.astype(np.float64) - target) ** 2)
    per_level /= len(clips)
    return float(per_level[:, 0].mean()), float(per_level[:, 1].mean()), [tuple(r) for r in per_level]


def _frame_psnr(recon: np.ndarray, cur: np.ndarray) -> list[float]:
    err = ((recon.astype(np.float64) - cur) * 255.0) ** 2
    return [mse_to_psnr(float(e.mean())) for e in err]


def _rollout_weights(psnrs: list[float], cfg: ExperimentConfig) -> np.ndarray:
    # the rollout's reference frame is taken to match the first P-frame, so its delta is 0
    state = MrqaState(cfg.lam, cfg.lambda_max)
    return np.asarray(schedule_rollout([psnrs[0]] + psnrs, state))


def _step_loss(model: ToyModel, clip: Clip, cfg: ExperimentConfig, phase: str) -> Tensor:
    contexts, coarse = _aligned(model, clip)
    use_head = phase in ("all", "finetune")
    recon = None
    if use_head:
        base = warp_tensor(clip.ref, clip.flows[0])
        recon = ops.add(base, model.residual(contexts[0]))

    weights = None
    if phase == "finetune" and cfg.train.mrqa:
        w = _rollout_weights(_frame_psnr(recon.data, clip.cur.data), cfg)
        weights = Tensor(w.reshape(-1, 1, 1, 1), dtype=TRAIN_DTYPE)

    dist = None
    for s in range(NUM_LEVELS):
        term = _weighted_mse(contexts[s], clip.cur_pyramid[s].data, weights)
        dist = term if dist is None else ops.add(dist, term)
    dist = ops.mul(dist, 1.0 / NUM_LEVELS)
    if use_head:
        dist = ops.add(dist, _weighted_mse(recon, clip.cur.data, weights))
    loss = ops.mul(dist, cfg.lam)
    if cfg.train.offset_penalty > 0:
        rate = None
        for c in coarse:
            term = ops.mean(ops.abs(c))
            rate = term if rate is None else ops.add(rate, term)
        loss = ops.add(loss, ops.mul(rate, cfg.train.offset_penalty / NUM_LEVELS))
    return loss


def phase_schedule(cfg: ExperimentConfig) -> list[str]:
    t = cfg.train
    total = sum(t.phases)
    n_motion = int(round(t.steps * t.phases[0] / total))
    n_context = int(round(t.steps * (t.phases[0] + t.phases[1]) / total)) - n_motion
    n_all = t.steps - n_motion - n_context
    return ["motion"] * n_motion + ["context"] * n_context + ["all"] * n_all + ["finetune"] * t.finetune_steps


def _trainable(model: ToyModel, phase: str) -> list[Tensor]:
    if phase == "motion":
        return model.params.parameter_group("motion")
    if phase == "context":
        return model.params.parameter_group("context")
    return (
        model.params.parameter_group("motion")
        + model.params.parameter_group("context")
        + model.head_parameters()
    )


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def train_toy(cfg: ExperimentConfig, output_dir: Optional[str] = None, save: bool = True) -> TrainReport:
    """Train on the seeded clip pool; deterministic for a fixed config."""
    start = time.perf_counter()
    out = output_dir if output_dir is not None else cfg.output_dir
    with default_dtype(TRAIN_DTYPE):
        model = ToyModel.init(cfg.channels, cfg.groups, seed=cfg.seed, dtype=TRAIN_DTYPE)
        train, holdout = build_pool(cfg, model)
        init_aligned, coarse_mse, _ = evaluate_alignment(model, holdout)

        losses, phases = [], []
        initial = None
        lr = cfg.train.lr
        for step, phase in enumerate(phase_schedule(cfg)):
            clip = train[step % len(train)]
            params = _trainable(model, phase)
            loss = _step_loss(model, clip, cfg, phase)
            value = float(loss.item())
            if initial is None:
                initial = value
            if not np.isfinite(value) or value > DIVERGENCE_FACTOR * initial:
                raise TrainingDiverged(
                    f"step {step} ({phase}): loss {value:.4g} exceeds {DIVERGENCE_FACTOR:g}x the "
                    f"initial {initial:.4g}; lower the learning rate (now {lr:g})"
                )
            for p in params:
                p.zero_grad()
            loss.backward()
            for p in params:
                if p.grad is not None:
                    p.data -= (lr * p.grad).astype(p.data.dtype)
            losses.append(value)
            phases.append(phase)
            if cfg.train.log_every and step % cfg.train.log_every == 0:
                log.info("step %d %s loss %.6g", step, phase, value)

        aligned, coarse_mse, level = evaluate_alignment(model, holdout)

    ckpt = None
    if save:
        os.makedirs(out, exist_ok=True)
        ckpt = os.path.join(out, CHECKPOINT_NAME)
        model.save(ckpt)
    return TrainReport(
        losses, phases, init_aligned, aligned, coarse_mse, ckpt, time.perf_counter() - start, level
    )
