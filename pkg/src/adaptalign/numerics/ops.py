"""Forward kernels and their vector-Jacobian products.

Layout is batch x channel x height x width throughout. Every op accepts
:class:`Tensor` inputs and returns a new tensor; gradients are recorded only
when some input requires them.

Deformable offsets are stored per group as interleaved ``(dx, dy)`` pairs in
kernel-tap order (row-major over the kernel window), so channel
``g*2*K + 2*t`` holds the x displacement of tap ``t`` in group ``g``. Mask
channel ``g*K + t`` scales the same tap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, get_default_dtype, make_result, records_tape

# column-matrix elements per band when no gradient tape is recorded
BAND_ELEMENTS = 1 << 22

__all__ = [
    "ConvSpec",
    "add",
    "sub",
    "mul",
    "sum",
    "mean",
    "abs",
    "sigmoid",
    "leaky_relu",
    "elementwise",
    "concat",
    "split",
    "channel_concat_split",
    "conv2d",
    "apply_resblock",
    "bilinear_sample",
    "bilinear_gather",
    "deformable_conv",
    "mse",
]

LEAKY_SLOPE = 0.1


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: tuple[int, int]
    stride: int
    padding: int
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        kh, kw = self.kernel_size
        expected = (self.out_channels, self.in_channels, kh, kw)
        if self.weight.shape != expected:
            raise ValueError(f"weight shape {self.weight.shape} != {expected}")
        if self.bias.shape != (self.out_channels,):
            raise ValueError(f"bias shape {self.bias.shape} != ({self.out_channels},)")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @classmethod
    def create(
        cls,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        init: str = "he",
        dtype=None,
    ) -> "ConvSpec":
        """Allocate a conv layer. ``init`` is ``"he"`` (scaled normal) or ``"zeros"``."""
        dtype = dtype or get_default_dtype()
        k = int(kernel_size)
        if padding is None:
            padding = k // 2
        shape = (out_channels, in_channels, k, k)
        if init == "zeros":
            w = np.zeros(shape)
        elif init == "he":
            rng = rng if rng is not None else np.random.default_rng(0)
            fan_in = in_channels * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        return cls(
            in_channels,
            out_channels,
            (k, k),
            stride,
            padding,
            Tensor(w, requires_grad=True, dtype=dtype),
            Tensor(np.zeros(out_channels), requires_grad=True, dtype=dtype),
        )

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _lift(a, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(a, dtype=dtype or get_default_dtype()))


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = np.asarray(x.data.sum() / n, dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(out, (x,), backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.abs(x.data)

    def backward(g):
        return (g * np.sign(x.data),)

    return make_result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so neither branch overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)

    def backward(g):
        return (np.where(pos, g, g * slope),)

    return make_result(out, (x,), backward)


def elementwise(a, kind: str, b=None, slope: float = LEAKY_SLOPE) -> Tensor:
    """Dispatch ``sigmoid``, ``leaky_relu``, ``add`` or ``mul``."""
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind in ("add", "mul"):
        if b is None:
            raise ValueError(f"{kind} needs a second operand")
        if isinstance(b, Tensor) and isinstance(a, Tensor) and a.shape != b.shape:
            raise ValueError(f"shape mismatch for {kind}: {a.shape} vs {b.shape}")
        return add(a, b) if kind == "add" else mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def mse(a: Tensor, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise ValueError(f"cannot concat shapes {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return make_result(out, tensors, backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    x = as_tensor(x)
    sizes = [int(s) for s in sizes]
    if np.sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not sum to {x.shape[axis]}")
    bounds = np.cumsum([0] + sizes)
    outs = []
    for i in range(len(sizes)):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        index = [slice(None)] * x.ndim
        index[axis] = slice(lo, hi)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        outs.append(make_result(x.data[index].copy(), (x,), backward))
    return outs


def channel_concat_split(inputs, mode: str, split_sizes: Optional[Sequence[int]] = None):
    if mode == "concat":
        return concat(inputs, axis=1)
    if mode == "split":
        if split_sizes is None:
            raise ValueError("split mode needs split_sizes")
        return split(inputs, split_sizes, axis=1)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _cols_matmul(cols: np.ndarray, weight: np.ndarray, bias: np.ndarray, ho: int, wo: int):
    """(N, C*K, L) columns times the flattened kernel; shared by conv and deformable conv."""
    n = cols.shape[0]
    w2 = weight.reshape(weight.shape[0], -1)
    out = np.matmul(w2, cols) + bias[None, :, None]
    return out.reshape(n, weight.shape[0], ho, wo)


def _cols_backward(g: np.ndarray, cols: np.ndarray, weight: np.ndarray, need_cols: bool):
    n, o = g.shape[:2]
    g2 = g.reshape(n, o, -1)
    w2 = weight.reshape(o, -1)
    if n == 1:
        dw = g2[0] @ cols[0].T
    else:
        dw = g2.transpose(1, 0, 2).reshape(o, -1) @ cols.transpose(1, 0, 2).reshape(cols.shape[1], -1).T
    dw = dw.reshape(weight.shape)
    db = g2.sum(axis=(0, 2))
    dcols = np.matmul(w2.T, g2) if need_cols else None
    return dcols, dw, db


def _band_rows(n: int, rows_of_cols: int, ho: int, wo: int) -> list[tuple[int, int]]:
    """Output-row bands whose column matrices hold about BAND_ELEMENTS values."""
    step = max(1, BAND_ELEMENTS // max(1, n * rows_of_cols * wo))
    return [(r, min(ho, r + step)) for r in range(0, ho, step)]


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, r0: int, r1: int, wo: int) -> np.ndarray:
    """Columns for output rows ``r0:r1`` of a padded input, shape (N, C*K, (r1-r0)*wo)."""
    n, c = xp.shape[:2]
    rows = r1 - r0
    cols = np.empty((n, c, kh * kw, rows, wo), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            y0 = ky + s * r0
            cols[:, :, ky * kw + kx] = xp[:, :, y0 : y0 + s * rows : s, kx : kx + s * wo : s]
    return cols.reshape(n, c * kh * kw, rows * wo)


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, spec expects {spec.in_channels}"
        )
    kh, kw = spec.kernel_size
    s, p = spec.stride, spec.padding
    ho, wo = _out_size(h, kh, s, p), _out_size(w, kw, s, p)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {h}x{w}, kernel {kh}x{kw}")
    weight, bias = spec.weight, spec.bias
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data

    if not records_tape((x, weight, bias)):
        out = np.empty((n, spec.out_channels, ho, wo), dtype=np.result_type(x.dtype, weight.dtype))
        for r0, r1 in _band_rows(n, c * kh * kw, ho, wo):
            cols = _im2col(xp, kh, kw, s, r0, r1, wo)
            out[:, :, r0:r1] = _cols_matmul(cols, weight.data, bias.data, r1 - r0, wo)
        return Tensor(out, dtype=out.dtype)

    cols = _im2col(xp, kh, kw, s, 0, ho, wo)
    out = _cols_matmul(cols, weight.data, bias.data, ho, wo)

    def backward(g):
        dcols, dw, db = _cols_backward(g, cols, weight.data, x.requires_grad)
        dx = None
        if dcols is not None:
            dcols = dcols.reshape(n, c, kh * kw, ho, wo)
            dxp = np.zeros_like(xp)
            for ky in range(kh):
                for kx in range(kw):
                    dxp[:, :, ky : ky + s * ho : s, kx : kx + s * wo : s] += dcols[:, :, ky * kw + kx]
            dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return dx, dw, db

    return make_result(out, (x, weight, bias), backward)


def apply_resblock(x: Tensor, conv1: ConvSpec, conv2: ConvSpec, slope: float = LEAKY_SLOPE) -> Tensor:
    """``x + conv2(leaky_relu(conv1(x)))``."""
    x = as_tensor(x)
    if conv1.in_channels != x.shape[1] or conv2.out_channels != x.shape[1]:
        raise ValueError(
            f"resblock channel mismatch: input {x.shape[1]}, "
            f"conv1 {conv1.in_channels}->{conv1.out_channels}, "
            f"conv2 {conv2.in_channels}->{conv2.out_channels}"
        )
    if conv1.out_channels != conv2.in_channels:
        raise ValueError("resblock convs do not chain")
    hidden = conv2d(leaky_relu(conv2d(x, conv1), slope), conv2)
    if hidden.shape != x.shape:
        raise ValueError(f"resblock convs change spatial size: {x.shape} -> {hidden.shape}")
    return add(x, hidden)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


class _Corners:
    """Neighbour indices and weights for a batch of sample positions."""

    __slots__ = ("idx", "w", "wx", "wy", "valid", "hw")

    def __init__(self, px: np.ndarray, py: np.ndarray, h: int, w: int, mode: str):
        x0f = np.floor(px)
        y0f = np.floor(py)
        self.wx = px - x0f
        self.wy = py - y0f
        x0 = x0f.astype(np.intp)
        y0 = y0f.astype(np.intp)
        x1 = x0 + 1
        y1 = y0 + 1
        if mode == "border":
            self.valid = None
        elif mode == "zeros":
            vx0 = (x0 >= 0) & (x0 < w)
            vx1 = (x1 >= 0) & (x1 < w)
            vy0 = (y0 >= 0) & (y0 < h)
            vy1 = (y1 >= 0) & (y1 < h)
            self.valid = (vy0 & vx0, vy0 & vx1, vy1 & vx0, vy1 & vx1)
        else:
            raise ValueError(f"unknown padding mode {mode!r}")
        x0 = np.clip(x0, 0, w - 1)
        x1 = np.clip(x1, 0, w - 1)
        y0 = np.clip(y0, 0, h - 1)
        y1 = np.clip(y1, 0, h - 1)
        self.idx = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1)
        ox = 1.0 - self.wx
        oy = 1.0 - self.wy
        self.w = (ox * oy, self.wx * oy, ox * self.wy, self.wx * self.wy)
        self.hw = h * w

    def values(self, flat: np.ndarray) -> list[np.ndarray]:
        """Corner values, shape (N, C, P) each; zero outside the frame in zeros mode."""
        vals = []
        for k in range(4):
            idx = self.idx[k]
            v = np.stack([flat[i][:, idx[i]] for i in range(flat.shape[0])])
            if self.valid is not None:
                v = np.where(self.valid[k][:, None, :], v, 0.0)
            vals.append(v)
        return vals


def _sample(flat: np.ndarray, corners: _Corners):
    v = corners.values(flat)
    w = corners.w
    out = v[0] * w[0][:, None] + v[1] * w[1][:, None] + v[2] * w[2][:, None] + v[3] * w[3][:, None]
    return out, v


def _sample_backward(g: np.ndarray, corners: _Corners, vals, need_feat: bool, need_coords: bool):
    """g is (N, C, P). Returns d/dflat (N, C, HW) and d/dpx, d/dpy (N, P)."""
    n, c, p = g.shape
    dflat = dpx = dpy = None
    if need_feat:
        hw = corners.hw
        base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * hw
        idx_parts = []
        wt_parts = []
        for k in range(4):
            wk = corners.w[k]
            if corners.valid is not None:
                wk = wk * corners.valid[k]
            idx_parts.append((base + corners.idx[k][:, None, :]).ravel())
            wt_parts.append((g * wk[:, None, :]).ravel())
        dflat = np.bincount(
            np.concatenate(idx_parts), weights=np.concatenate(wt_parts), minlength=n * c * hw
        ).astype(g.dtype).reshape(n, c, hw)
    if need_coords:
        v00, v01, v10, v11 = vals
        wx = corners.wx[:, None]
        wy = corners.wy[:, None]
        ddx = (1.0 - wy) * (v01 - v00) + wy * (v11 - v10)
        ddy = (1.0 - wx) * (v10 - v00) + wx * (v11 - v01)
        dpx = (g * ddx).sum(axis=1)
        dpy = (g * ddy).sum(axis=1)
    return dflat, dpx, dpy


def bilinear_gather(
    image: np.ndarray, px: np.ndarray, py: np.ndarray, padding_mode: str = "border"
) -> np.ndarray:
    """Plain-array sampler: ``image`` (C, H, W) or (H, W) at positions ``px, py`` (any shape)."""
    image = np.asarray(image)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    c, h, w = image.shape
    out_shape = np.shape(px)
    corners = _Corners(
        np.asarray(px, dtype=np.float64).reshape(1, -1),
        np.asarray(py, dtype=np.float64).reshape(1, -1),
        h,
        w,
        padding_mode,
    )
    flat = image.reshape(1, c, h * w).astype(np.float64, copy=False)
    out, _ = _sample(flat, corners)
    out = out.reshape((c,) + out_shape)
    return out[0] if squeeze else out


def bilinear_sample(feature: Tensor, coords: Tensor, padding_mode: str = "border") -> Tensor:
    """Sample ``feature`` (N, C, H, W) at absolute positions ``coords`` (N, 2, Ho, Wo).

    ``coords[:, 0]`` is x (column) and ``coords[:, 1]`` is y (row). Positions
    outside the frame read edge-clamped neighbours in ``"border"`` mode and zeros
    in ``"zeros"`` mode.
    """
    feature = as_tensor(feature)
    coords = as_tensor(coords, dtype=feature.dtype)
    if feature.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2:
        raise ValueError(f"bad shapes: feature {feature.shape}, coords {coords.shape}")
    if coords.shape[0] != feature.shape[0]:
        raise ValueError("batch size mismatch between feature and coords")
    n, c, h, w = feature.shape
    ho, wo = coords.shape[2:]
    px = coords.data[:, 0].reshape(n, -1)
    py = coords.data[:, 1].reshape(n, -1)
    flat = feature.data.reshape(n, c, h * w)
    if not records_tape((feature, coords)):
        out = np.empty((n, c, ho * wo), dtype=feature.dtype)
        for r0, r1 in _band_rows(n, 4 * c, ho, wo):
            sl = slice(r0 * wo, r1 * wo)
            out[:, :, sl], _ = _sample(flat, _Corners(px[:, sl], py[:, sl], h, w, padding_mode))
        return Tensor(out.reshape(n, c, ho, wo), dtype=feature.dtype)
    corners = _Corners(px, py, h, w, padding_mode)
    out, vals = _sample(flat, corners)

    def backward(g):
        dflat, dpx, dpy = _sample_backward(
            g.reshape(n, c, -1), corners, vals, feature.requires_grad, coords.requires_grad
        )
        dfeat = dflat.reshape(feature.shape) if dflat is not None else None
        dcoords = None
        if dpx is not None:
            dcoords = np.stack([dpx.reshape(n, ho, wo), dpy.reshape(n, ho, wo)], axis=1)
        return dfeat, dcoords

    return make_result(out.reshape(n, c, ho, wo), (feature, coords), backward)


# ---------------------------------------------------------------------------
# modulated deformable convolution
# ---------------------------------------------------------------------------


def deformable_conv(
    x: Tensor,
    offsets: Tensor,
    mask: Tensor,
    spec: ConvSpec,
    groups: int = 1,
    padding_mode: str = "zeros",
) -> Tensor:
    """Modulated deformable convolution.

    Tap ``t`` of output position ``(i, j)`` samples the input at
    ``(j*stride - pad + kx + dx, i*stride - pad + ky + dy)`` and the sample is
    multiplied by ``mask[:, g*K + t]`` before the weighted sum. With zero
    offsets, a unit mask and ``padding_mode="zeros"`` this reproduces
    :func:`conv2d` bit for bit.
    """
    x = as_tensor(x)
    offsets = as_tensor(offsets, dtype=x.dtype)
    mask = as_tensor(mask, dtype=x.dtype)
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    if groups < 1 or c % groups:
        raise ValueError(f"input channels {c} not divisible by groups {groups}")
    kh, kw = spec.kernel_size
    k = kh * kw
    s, p = spec.stride, spec.padding
    ho, wo = _out_size(h, kh, s, p), _out_size(w, kw, s, p)
    if offsets.shape != (n, 2 * groups * k, ho, wo):
        raise ValueError(
            f"offsets shape {offsets.shape} != {(n, 2 * groups * k, ho, wo)} (2*G*k*k channels)"
        )
    if mask.shape != (n, groups * k, ho, wo):
        raise ValueError(f"mask shape {mask.shape} != {(n, groups * k, ho, wo)} (G*k*k channels)")
    cg = c // groups
    dtype = x.dtype

    ii, jj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    tap_y, tap_x = np.divmod(np.arange(k), kw)
    base_x = (jj[None] * s - p + tap_x[:, None, None]).astype(dtype)  # (K, Ho, Wo)
    base_y = (ii[None] * s - p + tap_y[:, None, None]).astype(dtype)

    off = offsets.data.reshape(n, groups, k, 2, ho, wo)
    msk = mask.data.reshape(n, groups, k, ho, wo)
    flat = x.data.reshape(n, groups, cg, h * w)

    def columns(r0: int, r1: int, keep: bool):
        rows = r1 - r0
        cols = np.empty((n, groups, cg, k, rows * wo), dtype=dtype)
        cache = []
        for g in range(groups):
            px = (base_x[None, :, r0:r1] + off[:, g, :, 0, r0:r1]).reshape(n, -1)
            py = (base_y[None, :, r0:r1] + off[:, g, :, 1, r0:r1]).reshape(n, -1)
            corners = _Corners(px, py, h, w, padding_mode)
            sampled, vals = _sample(flat[:, g], corners)
            sampled = sampled.reshape(n, cg, k, rows * wo)
            cols[:, g] = sampled * msk[:, g, :, r0:r1].reshape(n, 1, k, -1)
            if keep:
                cache.append((corners, vals, sampled))
        return cols.reshape(n, c * k, rows * wo), cache

    if not records_tape((x, offsets, mask, spec.weight, spec.bias)):
        out = np.empty((n, spec.out_channels, ho, wo), dtype=np.result_type(dtype, spec.weight.dtype))
        for r0, r1 in _band_rows(n, c * k, ho, wo):
            cols, _ = columns(r0, r1, False)
            out[:, :, r0:r1] = _cols_matmul(cols, spec.weight.data, spec.bias.data, r1 - r0, wo)
        return Tensor(out, dtype=out.dtype)

    cols, cache = columns(0, ho, True)
    out = _cols_matmul(cols, spec.weight.data, spec.bias.data, ho, wo)
    msk = msk.reshape(n, groups, k, ho * wo)

    def backward(gout):
        need_x = x.requires_grad
        need_off = offsets.requires_grad
        need_cols = need_x or need_off or mask.requires_grad
        dcols, dw, db = _cols_backward(gout, cols, spec.weight.data, need_cols)
        dx = doff = dmask = None
        if need_cols:
            dcols = dcols.reshape(n, groups, cg, k, ho * wo)
            dx = np.zeros((n, groups, cg, h * w), dtype=dtype) if need_x else None
            doff = np.zeros((n, groups, k, 2, ho * wo), dtype=dtype) if need_off else None
            dmask = np.zeros((n, groups, k, ho * wo), dtype=dtype)
            for g in range(groups):
                corners, vals, sampled = cache[g]
                dc = dcols[:, g]
                dmask[:, g] = (dc * sampled).sum(axis=1)
                if need_x or need_off:
                    dsampled = (dc * msk[:, g][:, None]).reshape(n, cg, -1)
                    dflat, dpx, dpy = _sample_backward(dsampled, corners, vals, need_x, need_off)
                    if need_x:
                        dx[:, g] = dflat
                    if need_off:
                        doff[:, g, :, 0] = dpx.reshape(n, k, -1)
                        doff[:, g, :, 1] = dpy.reshape(n, k, -1)
            if dx is not None:
                dx = dx.reshape(x.shape)
            if doff is not None:
                doff = doff.reshape(offsets.shape)
            dmask = dmask.reshape(mask.shape)
        return dx, doff, dmask, dw, db

    return make_result(out, (x, offsets, mask, spec.weight, spec.bias), backward)
