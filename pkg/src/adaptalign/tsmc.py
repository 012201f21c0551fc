"""Two-stage motion compensation: coarse flow warp, then flow-guided deformable warp.

For each of three pyramid levels the reference feature is first warped by the
level's flow. The warped and unwarped features are fused to predict a coarse
offset and a modulation mask, a separate conv on the flow predicts a fine
offset, and a modulated deformable conv samples the unwarped feature with the
summed offset. Offsets are inferred on both sides from decoded data, so
nothing extra is transmitted.

Initialisation is chosen so the module starts out as pure flow-guided
warping: the fine-offset conv copies the flow into every tap's offset slot,
the coarse/mask head is zero (mask 0.5 everywhere), the deformable conv is a
centre-tap identity with gain 2 to undo that 0.5, and the refinement
resblocks have zero output convs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .flow import FlowField, rescale_flow, warp_tensor
from .imageio import FrameLike, as_rgb_array
from .numerics import ConvSpec, Tensor, get_default_dtype
from .numerics import ops

NUM_LEVELS = 3
DEFAULT_CHANNELS = (32, 64, 96)
MASK_INIT = 0.5  # sigmoid(0)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class ResBlock:
    conv1: ConvSpec
    conv2: ConvSpec

    @classmethod
    def create(cls, channels: int, rng, zero_output: bool = True, dtype=None) -> "ResBlock":
        return cls(
            ConvSpec.create(channels, channels, 3, rng=rng, dtype=dtype),
            ConvSpec.create(channels, channels, 3, rng=rng, init="zeros" if zero_output else "he", dtype=dtype),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ops.apply_resblock(x, self.conv1, self.conv2)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.conv1.weight", self.conv1.weight
        yield f"{prefix}.conv1.bias", self.conv1.bias
        yield f"{prefix}.conv2.weight", self.conv2.weight
        yield f"{prefix}.conv2.bias", self.conv2.bias


def _named_conv(prefix: str, conv: ConvSpec) -> Iterator[tuple[str, Tensor]]:
    yield f"{prefix}.weight", conv.weight
    yield f"{prefix}.bias", conv.bias


def identity_conv(channels: int, kernel_size: int = 3, gain: float = 1.0, dtype=None) -> ConvSpec:
    """Conv whose centre tap passes channel c to channel c scaled by ``gain``."""
    conv = ConvSpec.create(channels, channels, kernel_size, init="zeros", dtype=dtype)
    c = kernel_size // 2
    for ch in range(channels):
        conv.weight.data[ch, ch, c, c] = gain
    return conv


def flow_replicating_conv(groups: int, kernel_size: int = 3, dtype=None) -> ConvSpec:
    """Conv from a 2-channel flow to ``2*G*k*k`` offsets that copies (vx, vy) into every tap."""
    taps = kernel_size * kernel_size
    conv = ConvSpec.create(2, 2 * groups * taps, 3, init="zeros", dtype=dtype)
    for g in range(groups):
        for t in range(taps):
            conv.weight.data[g * 2 * taps + 2 * t, 0, 1, 1] = 1.0
            conv.weight.data[g * 2 * taps + 2 * t + 1, 1, 1, 1] = 1.0
    return conv


@dataclass
class LevelParams:
    hidden_res: ResBlock
    hidden_conv: ConvSpec
    fine_conv: ConvSpec
    dcn: ConvSpec
    refine: list[ResBlock]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.hidden_res.named(f"{prefix}.hidden_res")
        yield from _named_conv(f"{prefix}.hidden_conv", self.hidden_conv)
        yield from _named_conv(f"{prefix}.fine_conv", self.fine_conv)
        yield from _named_conv(f"{prefix}.dcn", self.dcn)
        for i, rb in enumerate(self.refine):
            yield from rb.named(f"{prefix}.refine{i}")


@dataclass
class FgdParams:
    channels: tuple
    kernel_size: int
    groups: int
    pyramid_convs: list[ConvSpec]
    pyramid_res: list[ResBlock]
    levels: list[LevelParams]

    @classmethod
    def init(
        cls,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        groups: int = 1,
        kernel_size: int = 3,
        seed: int = 0,
        refine_blocks: int = 2,
        dtype=None,
    ) -> "FgdParams":
        channels = tuple(int(c) for c in channels)
        if len(channels) != NUM_LEVELS:
            raise ValueError(f"need {NUM_LEVELS} channel counts, got {channels}")
        if any(c % groups for c in channels):
            raise ValueError(f"channels {channels} not divisible by {groups} groups")
        dtype = dtype or get_default_dtype()
        rng = np.random.default_rng(seed)
        taps = kernel_size * kernel_size
        pyramid_convs, pyramid_res, levels = [], [], []
        in_ch = 3
        for s, ch in enumerate(channels):
            stride = 1 if s == 0 else 2
            pyramid_convs.append(ConvSpec.create(in_ch, ch, 3, stride, 1, rng=rng, dtype=dtype))
            pyramid_res.append(ResBlock.create(ch, rng, dtype=dtype))
            in_ch = ch
        for ch in channels:
            levels.append(
                LevelParams(
                    hidden_res=ResBlock.create(2 * ch, rng, dtype=dtype),
                    hidden_conv=ConvSpec.create(2 * ch, 3 * groups * taps, 3, init="zeros", dtype=dtype),
                    fine_conv=flow_replicating_conv(groups, kernel_size, dtype=dtype),
                    dcn=identity_conv(ch, kernel_size, gain=1.0 / MASK_INIT, dtype=dtype),
                    refine=[ResBlock.create(ch, rng, dtype=dtype) for _ in range(refine_blocks)],
                )
            )
        return cls(channels, kernel_size, groups, pyramid_convs, pyramid_res, levels)

    # -- parameter views -------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for s, (conv, rb) in enumerate(zip(self.pyramid_convs, self.pyramid_res)):
            out.update(_named_conv(f"pyramid{s}.conv", conv))
            out.update(rb.named(f"pyramid{s}.res"))
        for s, lp in enumerate(self.levels):
            out.update(lp.named(f"level{s}"))
        return out

    def parameter_group(self, group: str) -> list[Tensor]:
        """``"pyramid"``, ``"motion"`` (offset/mask branches) or ``"context"`` (deformable conv and refinement)."""
        motion_keys = (".hidden_res.", ".hidden_conv.", ".fine_conv.")
        params = self.named_parameters()
        if group == "pyramid":
            return [t for k, t in params.items() if k.startswith("pyramid")]
        if group == "motion":
            return [t for k, t in params.items() if k.startswith("level") and any(m in k for m in motion_keys)]
        if group == "context":
            return [
                t for k, t in params.items() if k.startswith("level") and not any(m in k for m in motion_keys)
            ]
        raise ValueError(f"unknown parameter group {group!r}")

    def meta(self) -> dict:
        return {
            "channels": list(self.channels),
            "kernel_size": self.kernel_size,
            "groups": self.groups,
            "refine_blocks": len(self.levels[0].refine),
        }

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ValueError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
        for name, tensor in params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != {tensor.shape}")
            tensor.data[...] = value


# ---------------------------------------------------------------------------
# feature containers
# ---------------------------------------------------------------------------


@dataclass
class PyramidFeatures:
    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) != NUM_LEVELS:
            raise ValueError(f"expected {NUM_LEVELS} levels, got {len(self.levels)}")
        for a, b in zip(self.levels, self.levels[1:]):
            if (a.shape[2] // 2, a.shape[3] // 2) != b.shape[2:]:
                raise ValueError(f"level sizes {a.shape[2:]} -> {b.shape[2:]} do not halve")

    def __getitem__(self, s: int) -> Tensor:
        return self.levels[s]

    def __iter__(self):
        return iter(self.levels)

    def detach(self) -> "PyramidFeatures":
        return PyramidFeatures([t.detach() for t in self.levels])


@dataclass
class OffsetMask:
    offsets: Tensor
    mask: Tensor
    level: int
    coarse: Optional[Tensor] = None


@dataclass
class TsmcResult:
    refined: list[Tensor]
    contexts: list[Tensor]
    coarse: list[Tensor]
    offsets_masks: list[OffsetMask]
    pyramid: PyramidFeatures
    level_flows: list[FlowField] = field(default_factory=list)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def frame_tensor(frame: Union[FrameLike, Tensor], dtype=None) -> Tensor:
    """(1, 3, H, W) tensor scaled to [0, 1]."""
    if isinstance(frame, Tensor):
        return frame
    arr = as_rgb_array(frame) / 255.0
    return Tensor(arr[None], dtype=dtype or get_default_dtype())


def build_feature_pyramid(ref: Union[FrameLike, Tensor], params: FgdParams) -> PyramidFeatures:
    x = frame_tensor(ref, params.pyramid_convs[0].weight.dtype)
    h, w = x.shape[2:]
    if h % 4 or w % 4:
        raise ValueError(f"frame size {w}x{h} must be divisible by 4 for three levels")
    levels = []
    for conv, rb in zip(params.pyramid_convs, params.pyramid_res):
        x = rb(ops.conv2d(x, conv))
        levels.append(x)
    return PyramidFeatures(levels)


def _flow_tensor(flow: Union[FlowField, Tensor], like: Tensor) -> Tensor:
    if isinstance(flow, Tensor):
        return flow
    return Tensor(np.broadcast_to(flow.as_array()[None], (like.shape[0], 2) + flow.vx.shape), dtype=like.dtype)


def predict_offsets_masks(
    feature: Tensor, flow: Union[FlowField, Tensor], params: LevelParams, level: int, groups: int = 1
) -> OffsetMask:
    """Offsets and masks for one level from the reference feature and the level's flow."""
    v = _flow_tensor(flow, feature)
    if v.shape[2:] != feature.shape[2:]:
        raise ValueError(f"flow resolution {v.shape[2:]} does not match feature {feature.shape[2:]}")
    warped = warp_tensor(feature, v)
    hidden = ops.conv2d(params.hidden_res(ops.concat([warped, feature], axis=1)), params.hidden_conv)
    taps = params.dcn.kernel_size[0] * params.dcn.kernel_size[1]
    coarse, logits = ops.split(hidden, [2 * groups * taps, groups * taps], axis=1)
    mask = ops.sigmoid(logits)
    fine = ops.conv2d(v, params.fine_conv)
    return OffsetMask(ops.add(coarse, fine), mask, level, coarse)


def deformable_align(feature: Tensor, om: OffsetMask, params: LevelParams, groups: int = 1) -> Tensor:
    return ops.deformable_conv(feature, om.offsets, om.mask, params.dcn, groups, padding_mode="border")


def refine_contexts(contexts: Sequence[Tensor], params: FgdParams) -> list[Tensor]:
    if len(contexts) != NUM_LEVELS:
        raise ValueError(f"expected {NUM_LEVELS} contexts, got {len(contexts)}")
    out = []
    for ctx, lp in zip(contexts, params.levels):
        for rb in lp.refine:
            ctx = rb(ctx)
        out.append(ctx)
    return out


def level_flows(flow: FlowField) -> list[FlowField]:
    """Full-resolution flow resampled to each level (values scaled by 2^(1-s))."""
    return [flow if s == 0 else rescale_flow(flow, 0.5**s) for s in range(NUM_LEVELS)]


def coarse_warp_contexts(pyramid: PyramidFeatures, flow: FlowField) -> list[Tensor]:
    """First stage only: each level's feature warped by its flow."""
    return [warp_tensor(f, _flow_tensor(v, f)) for f, v in zip(pyramid, level_flows(flow))]


def tsmc_forward(
    ref: Union[FrameLike, Tensor],
    flow: FlowField,
    params: FgdParams,
    pyramid: Optional[PyramidFeatures] = None,
) -> TsmcResult:
    """Pyramid, per-level offset/mask prediction and deformable alignment, then refinement."""
    if pyramid is None:
        pyramid = build_feature_pyramid(ref, params)
    f1 = pyramid[0]
    if (flow.height, flow.width) != tuple(f1.shape[2:]):
        raise ValueError(f"flow {flow.width}x{flow.height} does not match frame {f1.shape[3]}x{f1.shape[2]}")
    flows = level_flows(flow)
    contexts, coarse, oms = [], [], []
    for s, (feat, v, lp) in enumerate(zip(pyramid, flows, params.levels)):
        vt = _flow_tensor(v, feat)
        om = predict_offsets_masks(feat, vt, lp, s, params.groups)
        contexts.append(deformable_align(feat, om, lp, params.groups))
        coarse.append(warp_tensor(feat, vt))
        oms.append(om)
    refined = refine_contexts(contexts, params)
    return TsmcResult(refined, contexts, coarse, oms, pyramid, flows)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FGDWARP\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Flat named-tensor archive.

    Layout (little-endian): magic, u32 version, u32 meta length, JSON meta,
    u32 count, then per tensor: u16 name length, UTF-8 name, u8 ndim,
    u32 dims, float64 values in C order.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            value = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(value.tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint archive")
        version, meta_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
    return tensors, meta


def params_from_checkpoint(path: str, dtype=None) -> tuple[FgdParams, dict[str, np.ndarray], dict]:
    """Rebuild :class:`FgdParams` from an archive; returns leftover tensors (e.g. the head) and meta."""
    tensors, meta = load_checkpoint(path)
    params = FgdParams.init(
        meta.get("channels", DEFAULT_CHANNELS),
        groups=meta.get("groups", 1),
        kernel_size=meta.get("kernel_size", 3),
        refine_blocks=meta.get("refine_blocks", 2),
        dtype=dtype,
    )
    params.load_state(tensors)
    own = set(params.named_parameters())
    extra = {k: v for k, v in tensors.items() if k not in own}
    return params, extra, meta
