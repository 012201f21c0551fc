"""Dense optical flow: estimation, warping, magnitude and resampling.

Flow convention: ``v(p)`` maps a pixel ``p`` of the current frame to the
location ``p + v(p)`` in the reference frame, so ``warp(ref, v)`` predicts the
current frame. Displacements are in pixels of the field's own resolution,
x to the right and y downward.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import ndimage, sparse

from .imageio import Frame, FrameLike, as_rgb_array, luma
from .numerics import Tensor, bilinear_sample
from .numerics import ops


@dataclass
class FlowField:
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        self.vx = np.asarray(self.vx, dtype=np.float64)
        self.vy = np.asarray(self.vy, dtype=np.float64)
        if self.vx.shape != self.vy.shape or self.vx.ndim != 2:
            raise ValueError(f"flow components must be equal 2-D grids: {self.vx.shape}, {self.vy.shape}")

    @property
    def height(self) -> int:
        return self.vx.shape[0]

    @property
    def width(self) -> int:
        return self.vx.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def constant(cls, width: int, height: int, dx: float, dy: float) -> "FlowField":
        return cls(np.full((height, width), float(dx)), np.full((height, width), float(dy)))

    def as_array(self) -> np.ndarray:
        """(2, H, W) stack of (vx, vy)."""
        return np.stack([self.vx, self.vy])

    def as_tensor(self, dtype=None) -> Tensor:
        return Tensor(self.as_array()[None], dtype=dtype)

    def equals(self, other: "FlowField") -> bool:
        return np.array_equal(self.vx, other.vx) and np.array_equal(self.vy, other.vy)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@functools.lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> sparse.csr_matrix:
    """Row-normalised triangle filter; support widens with the minification factor."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    rows, cols, vals = [], [], []
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = int(np.ceil(center - support))
        hi = int(np.floor(center + support))
        j = np.arange(lo, hi + 1)
        w = 1.0 - np.abs(j - center) / support
        keep = (w > 0) & (j >= 0) & (j < n_in)
        j, w = j[keep], w[keep]
        if w.size == 0:
            j = np.array([min(max(round_half_up(center), 0), n_in - 1)])
            w = np.array([1.0])
        rows.append(np.full(j.size, i))
        cols.append(j)
        vals.append(w / w.sum())
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_out, n_in)
    )


def resize_array(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (H, W) or (C, H, W) to ``size = (width, height)``.

    Magnification is plain bilinear interpolation on pixel centres with edge
    clamping; minification widens the triangle so every input pixel is
    averaged in.
    """
    image = np.asarray(image, dtype=np.float64)
    w_out, h_out = size
    if w_out < 1 or h_out < 1:
        raise ValueError(f"target size must be positive, got {size}")
    if image.ndim == 3:
        return np.stack([resize_array(c, size) for c in image])
    h_in, w_in = image.shape
    if (w_in, h_in) == (w_out, h_out):
        return image.copy()
    mh = _resize_matrix(h_in, h_out)
    mw = _resize_matrix(w_in, w_out)
    return np.asarray((mw @ (mh @ image).T).T)


def rescale_flow(
    flow: FlowField, factor: Optional[float] = None, size: Optional[tuple[int, int]] = None
) -> FlowField:
    """Resample a flow field and rescale its displacements to the new pixel grid.

    With only ``factor`` the output is ``round_half_up(dim * factor)`` pixels
    and values are multiplied by ``factor``. With an explicit ``size`` each
    component is multiplied by the exact per-axis size ratio instead.
    """
    if size is None:
        if factor is None or factor <= 0:
            raise ValueError("factor must be positive")
        size = (round_half_up(flow.width * factor), round_half_up(flow.height * factor))
        sx = sy = float(factor)
    else:
        sx = size[0] / flow.width
        sy = size[1] / flow.height
    w, h = size
    if w < 1 or h < 1:
        raise ValueError(f"rescaled flow would be empty ({w}x{h})")
    if (w, h) == flow.size and sx == 1.0 and sy == 1.0:
        return FlowField(flow.vx.copy(), flow.vy.copy())
    vx0 = flow.vx.flat[0]
    vy0 = flow.vy.flat[0]
    if np.all(flow.vx == vx0) and np.all(flow.vy == vy0):
        return FlowField.constant(w, h, vx0 * sx, vy0 * sy)
    return FlowField(resize_array(flow.vx, size) * sx, resize_array(flow.vy, size) * sy)


# ---------------------------------------------------------------------------
# warping and magnitude
# ---------------------------------------------------------------------------


def _sample_grid(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0 : flow.height, 0 : flow.width].astype(np.float64)
    return xs + flow.vx, ys + flow.vy


def warp_array(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Backward-warp an (H, W) or (C, H, W) array; float64 result."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != (flow.height, flow.width):
        raise ValueError(
            f"flow resolution {flow.width}x{flow.height} does not match "
            f"target {image.shape[-1]}x{image.shape[-2]}"
        )
    px, py = _sample_grid(flow)
    return ops.bilinear_gather(image, px, py, "border")


def warp_tensor(feature: Tensor, flow: Union[Tensor, FlowField]) -> Tensor:
    """Differentiable warp of an (N, C, H, W) tensor by an (N, 2, H, W) flow tensor."""
    if isinstance(flow, FlowField):
        flow = flow.as_tensor(dtype=feature.dtype)
    n, _, h, w = feature.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"flow shape {flow.shape} does not match feature {feature.shape}")
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.stack([xs, ys]).astype(feature.dtype)[None]
    return bilinear_sample(feature, ops.add(flow, grid), padding_mode="border")


def warp(target, flow):
    """``output(p) = target(p + v(p))`` with bilinear sampling and edge clamping.

    Frames come back as float RGB frames (not re-quantised), arrays as float64
    arrays and tensors as differentiable tensors.
    """
    if isinstance(target, Tensor):
        return warp_tensor(target, flow)
    if isinstance(flow, Tensor):
        raise TypeError("tensor flow needs a tensor target")
    if isinstance(target, Frame):
        out = warp_array(as_rgb_array(target), flow)
        return Frame(tuple(out), "RGB")
    return warp_array(target, flow)


def flow_magnitude(flow: FlowField) -> float:
    """Root-mean-square displacement ``sqrt((sum vx^2 + sum vy^2 + 1e-8) / (H*W))``."""
    total = float(np.sum(flow.vx * flow.vx)) + float(np.sum(flow.vy * flow.vy))
    return float(np.sqrt((total + 1e-8) / (flow.height * flow.width)))


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.empty_like(img)
    gy = np.empty_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gx[:, 0] = img[:, 1] - img[:, 0] if img.shape[1] > 1 else 0.0
    gx[:, -1] = img[:, -1] - img[:, -2] if img.shape[1] > 1 else 0.0
    gy[1:-1] = 0.5 * (img[2:] - img[:-2])
    gy[0] = img[1] - img[0] if img.shape[0] > 1 else 0.0
    gy[-1] = img[-1] - img[-2] if img.shape[0] > 1 else 0.0
    return gx, gy


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(np.mean(d * d))


@dataclass
class LucasKanade:
    """Coarse-to-fine dense Lucas-Kanade on Rec.709 luma.

    Each level runs up to ``iters`` incremental updates solved from the
    ``window`` x ``window`` structure tensor. An update is kept only if it
    lowers the level's warp error, and a level whose result is worse than
    zero flow falls back to zero flow, so the returned field never warps worse
    than no motion at all.
    """

    levels: int = 3
    iters: int = 5
    window: int = 7
    max_step: float = 2.0
    ridge: float = 1.0

    def min_size(self) -> int:
        return 2 ** (self.levels - 1)

    def __call__(self, cur: FrameLike, ref: FrameLike) -> FlowField:
        return self.estimate(luma(cur), luma(ref))

    def estimate(self, cur: np.ndarray, ref: np.ndarray) -> FlowField:
        cur = np.asarray(cur, dtype=np.float64)
        ref = np.asarray(ref, dtype=np.float64)
        if cur.shape != ref.shape:
            raise ValueError(f"frame sizes differ: {cur.shape} vs {ref.shape}")
        h, w = cur.shape
        if min(h, w) < self.min_size():
            raise ValueError(
                f"{w}x{h} frames are smaller than {self.min_size()} px needed for {self.levels} levels"
            )
        sizes = [(-(-w // 2**l), -(-h // 2**l)) for l in range(self.levels)]
        pyr_cur, pyr_ref = [cur], [ref]
        for size in sizes[1:]:
            pyr_cur.append(resize_array(pyr_cur[-1], size))
            pyr_ref.append(resize_array(pyr_ref[-1], size))

        flow = FlowField.zeros(*sizes[-1])
        for level in range(self.levels - 1, -1, -1):
            if flow.size != sizes[level]:
                flow = rescale_flow(flow, size=sizes[level])
            flow = self._refine(pyr_cur[level], pyr_ref[level], flow)
        return flow

    def _refine(self, cur: np.ndarray, ref: np.ndarray, flow: FlowField) -> FlowField:
        zero_err = _mse(cur, ref)
        warped = warp_array(ref, flow)
        err = _mse(cur, warped)
        gcx, gcy = _gradients(cur)
        size = self.window
        for _ in range(self.iters):
            gwx, gwy = _gradients(warped)
            gx = 0.5 * (gwx + gcx)
            gy = 0.5 * (gwy + gcy)
            it = warped - cur
            a11 = ndimage.uniform_filter(gx * gx, size, mode="nearest") + self.ridge
            a12 = ndimage.uniform_filter(gx * gy, size, mode="nearest")
            a22 = ndimage.uniform_filter(gy * gy, size, mode="nearest") + self.ridge
            b1 = ndimage.uniform_filter(gx * it, size, mode="nearest")
            b2 = ndimage.uniform_filter(gy * it, size, mode="nearest")
            det = a11 * a22 - a12 * a12
            du = -(a22 * b1 - a12 * b2) / det
            dv = -(a11 * b2 - a12 * b1) / det
            np.clip(du, -self.max_step, self.max_step, out=du)
            np.clip(dv, -self.max_step, self.max_step, out=dv)
            if not du.any() and not dv.any():
                break
            candidate = FlowField(flow.vx + du, flow.vy + dv)
            cand_warped = warp_array(ref, candidate)
            cand_err = _mse(cur, cand_warped)
            if not cand_err < err:
                break
            flow, warped, err = candidate, cand_warped, cand_err
        if err > zero_err:
            return FlowField.zeros(flow.width, flow.height)
        return flow


FlowEstimator = Callable[[FrameLike, FrameLike], FlowField]

DEFAULT_ESTIMATOR = LucasKanade()


def estimate_flow(
    cur: FrameLike, ref: FrameLike, levels: int = 3, iters_per_level: int = 5, window: int = 7
) -> FlowField:
    """Flow from ``cur`` to ``ref`` with the default Lucas-Kanade estimator."""
    return LucasKanade(levels=levels, iters=iters_per_level, window=window)(cur, ref)


# ---------------------------------------------------------------------------
# debug dumps
# ---------------------------------------------------------------------------


def write_flow(path: str, flow: FlowField) -> None:
    """Text header ``"<width> <height>\\n"`` followed by little-endian float32 (vx, vy) pairs."""
    pairs = np.stack([flow.vx, flow.vy], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(f"{flow.width} {flow.height}\n".encode("ascii"))
        fh.write(pairs.tobytes())


def read_flow(path: str) -> FlowField:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        w, h = int(header[0]), int(header[1])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != 2 * w * h:
        raise ValueError(f"{path}: expected {2 * w * h} floats, found {data.size}")
    pairs = data.reshape(h, w, 2).astype(np.float64)
    return FlowField(pairs[..., 0], pairs[..., 1])
