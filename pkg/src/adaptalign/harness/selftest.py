"""Quick invariant checks run by ``adaptalign selftest``."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..flow import FlowField
from ..imageio import Frame, rgb_to_yuv444_bt709, synth_sequence, yuv444_to_rgb_bt709
from ..metrics import RDCurve, bd_rate
from ..mrqa import BASE_WEIGHTS, MrqaState, schedule_rollout
from ..numerics import ConvSpec, Tensor, default_dtype, finite_diff_check, ops
from ..sme import ScaleSearchConfig, gated_flow


def _gradients() -> str:
    rng = np.random.default_rng(0)
    with default_dtype(np.float64):
        spec = ConvSpec.create(3, 4, 3, rng=rng)
        x = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
        off = Tensor(rng.uniform(-1.5, 1.5, (1, 18, 6, 6)), requires_grad=True)
        mask = Tensor(rng.uniform(0.1, 0.9, (1, 9, 6, 6)), requires_grad=True)
        rep = finite_diff_check(
            lambda: ops.sum(ops.deformable_conv(x, off, mask, spec)),
            [x, off, mask, spec.weight],
            rng=rng,
            max_coords=40,
        )
    assert rep.passed(1e-4), str(rep)
    return f"max rel err {rep.max_rel_error:.2e}"


def _degeneration() -> str:
    rng = np.random.default_rng(1)
    with default_dtype(np.float64):
        for _ in range(10):
            spec = ConvSpec.create(3, 5, 3, rng=rng)
            spec.bias.data[...] = rng.standard_normal(5)
            x = Tensor(rng.standard_normal((1, 3, 7, 5)))
            a = ops.conv2d(x, spec).data
            b = ops.deformable_conv(x, np.zeros((1, 18, 7, 5)), np.ones((1, 9, 7, 5)), spec).data
            assert np.array_equal(a, b)
    return "10 instances bit-identical"


def _mrqa() -> str:
    w = schedule_rollout([30.0] * 15, MrqaState(2048.0, 2048.0))
    assert w == [BASE_WEIGHTS[i % 7] for i in range(14)], w
    return "constant trace reproduces the base pattern"


def _bdrate() -> str:
    c = RDCurve.from_arrays([0.1, 0.2, 0.4, 0.8], [30.0, 32.0, 34.0, 36.0])
    half = RDCurve.from_arrays([0.05, 0.1, 0.2, 0.4], [30.0, 32.0, 34.0, 36.0])
    assert bd_rate(c, c) == 0.0
    assert abs(bd_rate(c, half) + 50.0) < 1e-6
    return "identical -> 0%, half rate -> -50%"


def _color() -> str:
    black = Frame((np.full((2, 2), 16.0), np.full((2, 2), 128.0), np.full((2, 2), 128.0)), "YUV444")
    white = Frame((np.full((2, 2), 235.0), np.full((2, 2), 128.0), np.full((2, 2), 128.0)), "YUV444")
    assert np.all(yuv444_to_rgb_bt709(black).to_array() == 0)
    assert np.all(yuv444_to_rgb_bt709(white).to_array() == 255)
    rgb = np.random.default_rng(2).integers(0, 256, (3, 16, 16)).astype(float)
    back = yuv444_to_rgb_bt709(rgb_to_yuv444_bt709(Frame.from_array(rgb))).to_array()
    assert np.abs(back - rgb).max() <= 1
    return "black/white exact, round trip within 1"


def _gate() -> str:
    f = next(iter(synth_sequence("static", frames=2, width=32, height=32)))
    assert gated_flow(f, f, ScaleSearchConfig(scales=(1.0, 2.0), tau=10.0)).search is None
    assert gated_flow(f, f, ScaleSearchConfig(scales=(1.0, 2.0), tau=0.0)).search is not None
    return "zero motion: tau=10 skips, tau=0 searches"


def _flow_scaling() -> str:
    from ..flow import rescale_flow

    f = rescale_flow(FlowField.constant(16, 8, 3.0, -2.0), 0.5)
    assert f.size == (8, 4) and np.all(f.vx == 1.5) and np.all(f.vy == -1.0)
    return "constant field halves exactly"


CHECKS: dict[str, Callable[[], str]] = {
    "deformable conv gradients": _gradients,
    "deformable/regular conv degeneration": _degeneration,
    "quality weights on constant trace": _mrqa,
    "BD-rate identities": _bdrate,
    "BT.709 anchors": _color,
    "scale-search gate": _gate,
    "flow rescaling": _flow_scaling,
}


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            results.append((name, True, fn()))
        except AssertionError as exc:
            results.append((name, False, str(exc) or "assertion failed"))
    return results


def all_passed(results) -> bool:
    return bool(results) and all(ok for _, ok, _ in results)
