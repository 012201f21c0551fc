"""Frames, raw 4:2:0 files, BT.709 conversion, padding and synthetic sequences.

BT.709 limited-range constants (8-bit), to 10 significant digits::

    Kr = 0.2126            Kg = 0.7152            Kb = 0.0722
    luma scale   255/219 = 1.164383562
    chroma scale 255/224 = 1.138392857
    R = Y' + 1.5748       * Pr
    G = Y' - 0.1873242729 * Pb - 0.4681242729 * Pr
    B = Y' + 1.8556       * Pb

where ``Y' = (Y - 16) / 219`` and ``Pb, Pr = (Cb - 128) / 224, (Cr - 128) / 224``.
Rounding is half away from zero after double-precision arithmetic.
"""

from __future__ import annotations

import itertools
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

KR = 0.2126
KB = 0.0722
KG = 1.0 - KR - KB
LUMA_WEIGHTS = (KR, KG, KB)

COLOR_SPACES = ("RGB", "YUV420", "YUV444")


@dataclass
class Frame:
    """One picture. ``planes`` are (H, W) grids; YUV420 chroma planes are (H/2, W/2)."""

    planes: tuple
    color_space: str = "RGB"
    bit_depth: int = 8

    def __post_init__(self):
        if self.color_space not in COLOR_SPACES:
            raise ValueError(f"unknown color space {self.color_space!r}")
        if self.bit_depth != 8:
            raise ValueError("only 8-bit content is supported")
        self.planes = tuple(np.asarray(p) for p in self.planes)
        if len(self.planes) != 3:
            raise ValueError(f"expected 3 planes, got {len(self.planes)}")
        h, w = self.planes[0].shape
        if self.color_space == "YUV420":
            if h % 2 or w % 2:
                raise ValueError(f"YUV420 needs even dimensions, got {w}x{h}")
            chroma = (h // 2, w // 2)
        else:
            chroma = (h, w)
        for p in self.planes[1:]:
            if p.shape != chroma:
                raise ValueError(f"chroma plane shape {p.shape} != {chroma}")
        for p in self.planes:
            if p.size and (p.min() < 0 or p.max() > 255):
                raise ValueError("plane values must lie in [0, 255]")

    @property
    def height(self) -> int:
        return self.planes[0].shape[0]

    @property
    def width(self) -> int:
        return self.planes[0].shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def to_array(self, dtype=np.float64) -> np.ndarray:
        """Stack full-resolution planes into a (3, H, W) array."""
        if self.color_space == "YUV420":
            raise ValueError("YUV420 planes differ in size; convert first")
        return np.stack([p.astype(dtype, copy=False) for p in self.planes])

    @classmethod
    def from_array(cls, array: np.ndarray, color_space: str = "RGB") -> "Frame":
        array = np.asarray(array)
        if array.ndim != 3 or array.shape[0] != 3:
            raise ValueError(f"expected a (3, H, W) array, got {array.shape}")
        return cls(tuple(array), color_space)

    def quantized(self) -> "Frame":
        """Round to uint8 (half away from zero) and clip."""
        return Frame(tuple(_to_uint8(p) for p in self.planes), self.color_space)

    def equals(self, other: "Frame") -> bool:
        return self.color_space == other.color_space and all(
            np.array_equal(a, b) for a, b in zip(self.planes, other.planes)
        )


FrameLike = Union[Frame, np.ndarray]


def as_rgb_array(frame: FrameLike) -> np.ndarray:
    """(3, H, W) float64 view of an RGB frame or array."""
    if isinstance(frame, Frame):
        if frame.color_space == "YUV420":
            frame = yuv420_to_rgb_bt709(frame)
        elif frame.color_space == "YUV444":
            frame = yuv444_to_rgb_bt709(frame)
        return frame.to_array()
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def luma(frame: FrameLike) -> np.ndarray:
    """Rec.709 luma of an RGB frame, shape (H, W), same 0..255 scale."""
    arr = as_rgb_array(frame)
    if arr.shape[0] == 1:
        return arr[0]
    return KR * arr[0] + KG * arr[1] + KB * arr[2]


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(x, dtype=np.float64)), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# raw 4:2:0 files
# ---------------------------------------------------------------------------


@dataclass
class SequenceSpec:
    """Where frames come from: a raw I420 file or a named synthetic generator."""

    width: int
    height: int
    frame_count: int
    path: Optional[str] = None
    generator: Optional[str] = None
    params: dict = field(default_factory=dict)
    seed: int = 0
    frame_rate: float = 30.0

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("frame_count must be >= 2")
        if (self.path is None) == (self.generator is None):
            raise ValueError("give exactly one of path or generator")


def frame_bytes_420(width: int, height: int) -> int:
    return width * height * 3 // 2


def count_raw_frames(path: str, width: int, height: int) -> int:
    per = frame_bytes_420(width, height)
    size = os.path.getsize(path)
    if size % per:
        raise ValueError(
            f"{path}: size {size} bytes is not a multiple of the {per}-byte "
            f"{width}x{height} 4:2:0 frame (expected {(size // per) * per} or "
            f"{(size // per + 1) * per} bytes)"
        )
    return size // per


def read_raw_video(spec: SequenceSpec) -> Iterator[Frame]:
    """Yield ``spec.frame_count`` YUV420 frames from a planar 8-bit I420 file."""
    if spec.path is None:
        raise ValueError("read_raw_video needs a file-backed SequenceSpec")
    w, h = spec.width, spec.height
    if w % 2 or h % 2:
        raise ValueError(f"4:2:0 needs even dimensions, got {w}x{h}")
    per = frame_bytes_420(w, h)
    expected = per * spec.frame_count
    actual = os.path.getsize(spec.path)
    if actual % per:
        raise ValueError(
            f"{spec.path}: expected a multiple of {per} bytes per frame "
            f"({expected} bytes for {spec.frame_count} frames), found {actual} bytes"
        )
    if actual < expected:
        raise ValueError(
            f"{spec.path}: expected {expected} bytes for {spec.frame_count} frames, "
            f"found {actual} bytes"
        )
    ysize, csize = w * h, (w // 2) * (h // 2)
    with open(spec.path, "rb") as fh:
        for _ in range(spec.frame_count):
            buf = np.frombuffer(fh.read(per), dtype=np.uint8)
            y = buf[:ysize].reshape(h, w)
            u = buf[ysize : ysize + csize].reshape(h // 2, w // 2)
            v = buf[ysize + csize :].reshape(h // 2, w // 2)
            yield Frame((y, u, v), "YUV420")


def write_raw_video(path: str, frames: Sequence[Frame]) -> None:
    with open(path, "wb") as fh:
        for f in frames:
            if f.color_space != "YUV420":
                raise ValueError("write_raw_video expects YUV420 frames")
            for p in f.planes:
                fh.write(np.ascontiguousarray(p, dtype=np.uint8).tobytes())


def read_png(path: str) -> Frame:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return Frame.from_array(arr.transpose(2, 0, 1))


def write_png(path: str, frame: FrameLike) -> None:
    from PIL import Image

    arr = _to_uint8(as_rgb_array(frame)).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(arr), mode="RGB").save(path)


# ---------------------------------------------------------------------------
# BT.709 conversion
# ---------------------------------------------------------------------------


def _upsample_chroma(plane: np.ndarray) -> np.ndarray:
    """Co-sited bilinear 2x upsampling: even outputs copy, odd outputs average neighbours."""
    p = plane.astype(np.float64)

    def up(a: np.ndarray, axis: int) -> np.ndarray:
        n = a.shape[axis]
        nxt = np.take(a, np.minimum(np.arange(n) + 1, n - 1), axis=axis)
        out_shape = list(a.shape)
        out_shape[axis] = 2 * n
        out = np.empty(out_shape)
        even = [slice(None)] * a.ndim
        odd = [slice(None)] * a.ndim
        even[axis] = slice(0, None, 2)
        odd[axis] = slice(1, None, 2)
        out[tuple(even)] = a
        out[tuple(odd)] = 0.5 * a + 0.5 * nxt
        return out

    return up(up(p, 0), 1)


def _ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    yn = (y - 16.0) / 219.0
    pb = (cb - 128.0) / 224.0
    pr = (cr - 128.0) / 224.0
    r = yn + 2.0 * (1.0 - KR) * pr
    b = yn + 2.0 * (1.0 - KB) * pb
    g = (yn - KR * r - KB * b) / KG
    return np.clip(round_half_away(np.stack([r, g, b]) * 255.0), 0, 255)


def _rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb / 255.0
    yl = KR * r + KG * g + KB * b
    pb = (b - yl) / (2.0 * (1.0 - KB))
    pr = (r - yl) / (2.0 * (1.0 - KR))
    return np.stack([16.0 + 219.0 * yl, 128.0 + 224.0 * pb, 128.0 + 224.0 * pr])


def yuv420_to_rgb_bt709(f: Frame) -> Frame:
    if f.color_space != "YUV420":
        raise ValueError(f"expected YUV420 input, got {f.color_space}")
    y = f.planes[0].astype(np.float64)
    rgb = _ycbcr_to_rgb(y, _upsample_chroma(f.planes[1]), _upsample_chroma(f.planes[2]))
    return Frame(tuple(rgb.astype(np.uint8)), "RGB")


def yuv444_to_rgb_bt709(f: Frame) -> Frame:
    if f.color_space != "YUV444":
        raise ValueError(f"expected YUV444 input, got {f.color_space}")
    y, u, v = (p.astype(np.float64) for p in f.planes)
    return Frame(tuple(_ycbcr_to_rgb(y, u, v).astype(np.uint8)), "RGB")


def rgb_to_yuv444_bt709(f: Frame, refine: bool = True) -> Frame:
    """RGB -> limited-range YUV444.

    Plain rounding of the forward matrix leaves up to 2 levels of round-trip
    error in blue, because one Cb step spans about 2.1 blue levels. With
    ``refine`` the rounded triple is replaced by the neighbour in
    {-1, 0, 1}^3 with the smallest worst-channel round-trip error whenever
    that is strictly smaller, which bounds the round trip by 1 level.
    """
    if f.color_space != "RGB":
        raise ValueError(f"expected RGB input, got {f.color_space}")
    rgb = f.to_array()
    ycc = np.clip(round_half_away(_rgb_to_ycbcr(rgb)), 0, 255)
    if refine:
        best_err = np.abs(_ycbcr_to_rgb(*ycc) - rgb).max(axis=0)
        best = ycc.copy()
        for d in itertools.product((-1.0, 0.0, 1.0), repeat=3):
            if d == (0.0, 0.0, 0.0):
                continue
            cand = np.clip(ycc + np.asarray(d)[:, None, None], 0, 255)
            err = np.abs(_ycbcr_to_rgb(*cand) - rgb).max(axis=0)
            better = err < best_err
            if better.any():
                best[:, better] = cand[:, better]
                best_err = np.where(better, err, best_err)
        ycc = best
    return Frame(tuple(ycc.astype(np.uint8)), "YUV444")


def rgb_to_yuv420_bt709(f: Frame) -> Frame:
    """RGB -> YUV420 with co-sited chroma decimation (keeps even-position samples)."""
    yuv = rgb_to_yuv444_bt709(f, refine=False)
    y, u, v = yuv.planes
    if f.width % 2 or f.height % 2:
        raise ValueError("YUV420 needs even dimensions")
    return Frame((y, u[::2, ::2].copy(), v[::2, ::2].copy()), "YUV420")


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------


def padded_size(width: int, height: int, m: int = 16) -> tuple[int, int]:
    if m < 1:
        raise ValueError("multiple must be >= 1")
    return -(-width // m) * m, -(-height // m) * m


def pad_to_multiple(f: FrameLike, m: int = 16):
    """Replicate-pad right and bottom to the next multiple of ``m``.

    Returns ``(padded, (width, height))`` with the original size so rates can
    be normalised by the unpadded pixel count.
    """
    if isinstance(f, Frame):
        w, h = f.size
        pw, ph = padded_size(w, h, m)
        if f.color_space == "YUV420":
            if m % 2:
                raise ValueError("YUV420 padding needs an even multiple")
            planes = [np.pad(f.planes[0], ((0, ph - h), (0, pw - w)), mode="edge")]
            planes += [
                np.pad(p, ((0, (ph - h) // 2), (0, (pw - w) // 2)), mode="edge")
                for p in f.planes[1:]
            ]
        else:
            planes = [np.pad(p, ((0, ph - h), (0, pw - w)), mode="edge") for p in f.planes]
        return Frame(tuple(planes), f.color_space), (w, h)
    arr = np.asarray(f)
    h, w = arr.shape[-2:]
    pw, ph = padded_size(w, h, m)
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph - h), (0, pw - w)]
    return np.pad(arr, pad, mode="edge"), (w, h)


def crop(f: FrameLike, size: tuple[int, int]):
    """Inverse of :func:`pad_to_multiple`: keep the top-left ``(width, height)``."""
    w, h = size
    if isinstance(f, Frame):
        if f.color_space == "YUV420":
            planes = [f.planes[0][:h, :w]] + [p[: h // 2, : w // 2] for p in f.planes[1:]]
        else:
            planes = [p[:h, :w] for p in f.planes]
        return Frame(tuple(np.ascontiguousarray(p) for p in planes), f.color_space)
    return np.ascontiguousarray(np.asarray(f)[..., :h, :w])


# ---------------------------------------------------------------------------
# synthetic content
# ---------------------------------------------------------------------------


def noise_tile(shape: tuple[int, int], seed: int, beta: float = 1.6) -> np.ndarray:
    """Periodic RGB texture with a 1/f^beta amplitude spectrum, values in [0, 255]."""
    th, tw = shape
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(th)[:, None]
    fx = np.fft.rfftfreq(tw)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    amp = 1.0 / (radius + 2.0 / max(th, tw)) ** beta
    amp[0, 0] = 0.0

    def field_():
        spec = np.fft.rfft2(rng.standard_normal((th, tw))) * amp
        f = np.fft.irfft2(spec, s=(th, tw))
        return f / f.std()

    base = field_()
    chroma = [field_() for _ in range(3)]
    tile = np.stack([128.0 + 42.0 * (base + 0.35 * c) for c in chroma])
    return np.clip(tile, 0.0, 255.0)


def _rotation(theta: float, scale: float = 1.0) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return scale * np.array([[c, -s], [s, c]])


@dataclass
class FlowTruth:
    """Exact displacement from frame k to frame k-1 (current -> reference)."""

    vx: np.ndarray
    vy: np.ndarray


class SyntheticSequence:
    """Texture moved by a fixed per-frame affine map.

    Frame k satisfies ``frame_k(p) = frame_{k-1}(B (p - c) + c - t)``: content
    moves by ``t`` pixels per frame (plus the linear part ``B`` about the
    centre ``c``). Integer translations with ``B = I`` are exact pixel shifts.
    """

    KINDS = ("global_shift", "affine", "rotating_texture", "static")

    def __init__(
        self,
        kind: str,
        width: int,
        height: int,
        frames: int,
        params: Optional[dict] = None,
        seed: int = 0,
        tile: int = 512,
    ):
        if kind not in self.KINDS:
            raise ValueError(f"unknown synthetic kind {kind!r}; choose from {self.KINDS}")
        params = dict(params or {})
        self.kind = kind
        self.width, self.height, self.frames = int(width), int(height), int(frames)
        self.seed = seed
        b = np.eye(2)
        t = np.zeros(2)
        if kind == "global_shift":
            t = np.array([float(params.get("dx", 0.0)), float(params.get("dy", 0.0))])
        elif kind == "rotating_texture":
            b = _rotation(float(params.get("theta", 0.01)))
        elif kind == "affine":
            b = _rotation(float(params.get("theta", 0.0)), float(params.get("scale", 1.0)))
            b = b @ np.array([[1.0, float(params.get("shear", 0.0))], [0.0, 1.0]])
            t = np.array([float(params.get("dx", 0.0)), float(params.get("dy", 0.0))])
        self.linear = b
        self.translation = t
        self.center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        truth = self.true_flow()
        peak = max(np.abs(truth.vx).max(), np.abs(truth.vy).max())
        if peak >= min(width, height):
            raise ValueError(
                f"per-frame motion of {peak:.1f} px exceeds the {width}x{height} frame"
            )
        rng = np.random.default_rng(seed)
        self.origin = rng.integers(0, tile, size=2).astype(np.float64)
        self.tile = noise_tile((tile, tile), seed)

    def __len__(self) -> int:
        return self.frames

    def _content_map(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        a = np.eye(2)
        b = self.origin.copy()
        step = self.center - self.translation - self.linear @ self.center
        for _ in range(k):
            b = a @ step + b
            a = a @ self.linear
        return a, b

    def frame_array(self, k: int) -> np.ndarray:
        a, b = self._content_map(k)
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        if np.array_equal(a, np.eye(2)):
            cx = xs + b[0]
            cy = ys + b[1]
        else:
            cx = a[0, 0] * xs + a[0, 1] * ys + b[0]
            cy = a[1, 0] * xs + a[1, 1] * ys + b[1]
        return _sample_periodic(self.tile, cx, cy)

    def frame(self, k: int) -> Frame:
        if not 0 <= k < self.frames:
            raise IndexError(k)
        return Frame(tuple(_to_uint8(self.frame_array(k))), "RGB")

    def __iter__(self) -> Iterator[Frame]:
        for k in range(self.frames):
            yield self.frame(k)

    def true_flow(self) -> FlowTruth:
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        dx = xs - self.center[0]
        dy = ys - self.center[1]
        b, c, t = self.linear, self.center, self.translation
        qx = b[0, 0] * dx + b[0, 1] * dy + c[0] - t[0]
        qy = b[1, 0] * dx + b[1, 1] * dy + c[1] - t[1]
        return FlowTruth(qx - xs, qy - ys)


def _sample_periodic(tile: np.ndarray, cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
    c, th, tw = tile.shape
    x0f = np.floor(cx)
    y0f = np.floor(cy)
    wx = cx - x0f
    wy = cy - y0f
    x0 = np.mod(x0f.astype(np.int64), tw)
    y0 = np.mod(y0f.astype(np.int64), th)
    x1 = np.mod(x0 + 1, tw)
    y1 = np.mod(y0 + 1, th)
    if not wx.any() and not wy.any():
        return tile[:, y0, x0]
    return (
        tile[:, y0, x0] * ((1 - wx) * (1 - wy))
        + tile[:, y0, x1] * (wx * (1 - wy))
        + tile[:, y1, x0] * ((1 - wx) * wy)
        + tile[:, y1, x1] * (wx * wy)
    )


def synth_sequence(
    kind: str,
    params: Optional[dict] = None,
    frames: int = 2,
    width: int = 64,
    height: int = 64,
    seed: int = 0,
) -> SyntheticSequence:
    """Seeded synthetic clip; iterate it for frames, ``true_flow()`` for the exact motion."""
    return SyntheticSequence(kind, width, height, frames, params, seed)


def open_sequence(spec: SequenceSpec):
    """Iterate RGB frames of a file-backed or synthetic sequence."""
    if spec.path is not None:
        available = count_raw_frames(spec.path, spec.width, spec.height)
        count = spec.frame_count
        if available < count:
            warnings.warn(
                f"{spec.path} holds {available} frames, fewer than the requested {count}"
            )
            count = available
        sub = SequenceSpec(spec.width, spec.height, max(count, 2), path=spec.path)
        for f in itertools.islice(read_raw_video(sub), count):
            yield yuv420_to_rgb_bt709(f)
        return
    kind = spec.generator.split(":", 1)[-1]
    yield from synth_sequence(kind, spec.params, spec.frame_count, spec.width, spec.height, spec.seed)
