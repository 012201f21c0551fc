"""TSMC parameters bundled with the toy reconstruction head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..flow import FlowField, warp_array
from ..numerics import ConvSpec, Tensor, no_grad, ops
from ..tsmc import (
    FgdParams,
    PyramidFeatures,
    build_feature_pyramid,
    coarse_warp_contexts,
    params_from_checkpoint,
    save_checkpoint,
    tsmc_forward,
)


@dataclass
class Reconstruction:
    image: np.ndarray  # (3, H, W) on the 0..255 scale, unclipped
    offset_magnitude: float  # mean |coarse offset| over levels (0 without TSMC)


@dataclass
class ToyModel:
    """FGDwarp parameters plus a single conv mapping the level-1 context to an RGB residual.

    The head's output is added to the pixel-domain warp of the reference, so
    a zero head reproduces plain flow-guided warping.
    """

    params: FgdParams
    head: ConvSpec

    @classmethod
    def init(cls, channels, groups: int = 1, seed: int = 0, dtype=None) -> "ToyModel":
        params = FgdParams.init(channels, groups=groups, seed=seed, dtype=dtype)
        head = ConvSpec.create(params.channels[0], 3, 3, init="zeros", dtype=params.pyramid_convs[0].weight.dtype)
        return cls(params, head)

    @classmethod
    def load(cls, path: str, dtype=None) -> "ToyModel":
        params, extra, _ = params_from_checkpoint(path, dtype=dtype)
        dtype = params.pyramid_convs[0].weight.dtype
        try:
            w, b = extra["head.weight"], extra["head.bias"]
        except KeyError:
            raise ValueError(f"{path}: checkpoint has no reconstruction head") from None
        head = ConvSpec.create(w.shape[1], w.shape[0], w.shape[2], init="zeros", dtype=dtype)
        head.weight.data[...] = w
        head.bias.data[...] = b
        return cls(params, head)

    def save(self, path: str) -> None:
        tensors = {k: v.data for k, v in self.params.named_parameters().items()}
        tensors["head.weight"] = self.head.weight.data
        tensors["head.bias"] = self.head.bias.data
        save_checkpoint(path, tensors, self.params.meta())

    def head_parameters(self) -> list[Tensor]:
        return [self.head.weight, self.head.bias]

    def contexts(self, ref, flow: FlowField, tsmc: bool = True, pyramid: Optional[PyramidFeatures] = None):
        """Level contexts and the mean coarse-offset magnitude."""
        if pyramid is None:
            pyramid = build_feature_pyramid(ref, self.params)
        if not tsmc:
            return coarse_warp_contexts(pyramid, flow), 0.0
        res = tsmc_forward(ref, flow, self.params, pyramid=pyramid)
        mag = float(np.mean([np.abs(om.coarse.data).mean() for om in res.offsets_masks]))
        return res.refined, mag

    def residual(self, context1: Tensor) -> Tensor:
        return ops.conv2d(context1, self.head)

    def reconstruct(self, ref: np.ndarray, flow: FlowField, tsmc: bool = True) -> Reconstruction:
        """Predict the current frame from a (3, H, W) reference on the 0..255 scale."""
        ref = np.asarray(ref, dtype=np.float64)
        with no_grad():
            ctx, mag = self.contexts(ref, flow, tsmc)
            res = self.residual(ctx[0]).data[0].astype(np.float64) * 255.0
        base = warp_array(ref, flow)
        return Reconstruction(base + res, mag)
