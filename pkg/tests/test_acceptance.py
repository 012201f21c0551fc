"""Acceptance criteria, each at its stated tolerance and time budget.

Every test here carries ``@pytest.mark.criterion``; the run ends with one
PASS/FAIL line per criterion. Run just this file with::

    python3 -m pytest tests/test_acceptance.py -v
"""

import time

import numpy as np
import pytest
from bd_reference import overlapping_pairs, reference_bd_rate

from adaptalign.flow import LucasKanade
from adaptalign.harness.config import ExperimentConfig, TrainConfig
from adaptalign.harness.ablation import ABLATION_MATRIX, run_ablation
from adaptalign.harness.evaluate import evaluate_sequence
from adaptalign.harness.train import train_toy
from adaptalign.imageio import (
    Frame,
    SequenceSpec,
    crop,
    pad_to_multiple,
    rgb_to_yuv444_bt709,
    synth_sequence,
    yuv420_to_rgb_bt709,
    yuv444_to_rgb_bt709,
)
from adaptalign.metrics import RDCurve, bd_rate
from adaptalign.mrqa import BASE_WEIGHTS, MrqaState, modulated_weight, schedule_rollout, weight_bounds
from adaptalign.numerics import (
    ConvSpec,
    Tensor,
    apply_resblock,
    bilinear_sample,
    conv2d,
    default_dtype,
    deformable_conv,
    finite_diff_check,
    ops,
)
from adaptalign.sme import FULL_SCALES, ScaleSearchConfig, gated_flow, select_scale
from adaptalign.tsmc import FgdParams, predict_offsets_masks

criterion = pytest.mark.criterion


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------


def _squared(fn):
    return lambda: ops.sum(ops.mul(fn(), fn()))


def _gradient_cases(rng):
    """(name, closure, inputs, eps) on random double-precision instances no larger than 1x8x8x8."""
    cases = []
    for trial in range(3):
        c, o = (int(v) for v in rng.integers(1, 9, 2))
        h, w = (int(v) for v in rng.integers(4, 9, 2))
        stride = 1 + trial % 2
        x = Tensor(rng.standard_normal((1, c, h, w)), requires_grad=True)
        spec = ConvSpec.create(c, o, 3, stride=stride, rng=rng)
        spec.bias.data[...] = rng.standard_normal(o)
        cases.append((f"conv2d[{trial}]", _squared(lambda x=x, s=spec: conv2d(x, s)), [x, spec.weight, spec.bias], 1e-4))

        c1 = ConvSpec.create(c, c, 3, rng=rng)
        c2 = ConvSpec.create(c, c, 3, rng=rng)
        c1.bias.data[...] = rng.standard_normal(c) * 0.1
        xr = Tensor(rng.standard_normal((1, c, h, w)), requires_grad=True)
        cases.append(
            (
                f"resblock[{trial}]",
                _squared(lambda x=xr, a=c1, b=c2: apply_resblock(x, a, b)),
                [xr, c1.weight, c1.bias, c2.weight, c2.bias],
                1e-4,
            )
        )

        f = Tensor(rng.standard_normal((1, c, h, w)), requires_grad=True)
        # coordinates kept at least 0.1 px from integer positions, where bilinear is not differentiable
        coords = Tensor(
            rng.integers(0, min(h, w) - 1, (1, 2, h, w)) + rng.uniform(0.1, 0.9, (1, 2, h, w)), requires_grad=True
        )
        cases.append((f"bilinear_sample[{trial}]", _squared(lambda f=f, g=coords: bilinear_sample(f, g)), [f, coords], 1e-5))

        groups = 1 + trial % 2 if c % 2 == 0 else 1
        xd = Tensor(rng.standard_normal((1, c, h, w)), requires_grad=True)
        dspec = ConvSpec.create(c, o, 3, rng=rng)
        dspec.bias.data[...] = rng.standard_normal(o)
        off = Tensor(rng.uniform(-1.5, 1.5, (1, 18 * groups, h, w)) + 0.33, requires_grad=True)
        mask = Tensor(rng.uniform(0.1, 0.9, (1, 9 * groups, h, w)), requires_grad=True)
        cases.append(
            (
                f"deformable_conv[{trial}, G={groups}]",
                _squared(lambda x=xd, of=off, m=mask, s=dspec, g=groups: deformable_conv(x, of, m, s, groups=g)),
                [xd, off, mask, dspec.weight, dspec.bias],
                1e-5,
            )
        )

        p = FgdParams.init((8, 8, 8), seed=trial)
        for t in p.named_parameters().values():
            t.data[...] = rng.normal(0, 0.2, t.shape)
        lp = p.levels[0]
        feat = Tensor(rng.standard_normal((1, 8, h, w)), requires_grad=True)
        flow = Tensor(rng.uniform(-1, 1, (1, 2, h, w)) + 0.37, requires_grad=True)

        def chain(feat=feat, flow=flow, lp=lp):
            om = predict_offsets_masks(feat, flow, lp, 0)
            return ops.add(ops.sum(ops.mul(om.offsets, om.offsets)), ops.sum(om.mask))

        cases.append(
            (
                f"predict_offsets_masks[{trial}]",
                chain,
                [feat, flow, lp.hidden_res.conv1.weight, lp.hidden_res.conv2.weight, lp.hidden_conv.weight,
                 lp.hidden_conv.bias, lp.fine_conv.weight],
                1e-6,
            )
        )
    return cases


@criterion("gradient suite")
def test_gradient_suite(record_property):
    rng = np.random.default_rng(20)
    start = time.perf_counter()
    worst, failures = 0.0, []
    with default_dtype(np.float64):
        for name, closure, inputs, eps in _gradient_cases(rng):
            rep = finite_diff_check(closure, inputs, eps=eps, rng=rng, max_coords=40)
            worst = max(worst, rep.max_rel_error)
            if not rep.passed(1e-4):
                failures.append(f"{name}: {rep}")
    elapsed = time.perf_counter() - start
    record_property("detail", f"worst rel err {worst:.2e}, {elapsed:.1f} s")
    assert not failures, "\n".join(failures)
    assert elapsed < 60


# ---------------------------------------------------------------------------
# degeneration identity
# ---------------------------------------------------------------------------


@criterion("degeneration identity")
def test_degeneration_identity(record_property):
    rng = np.random.default_rng(21)
    with default_dtype(np.float64):
        for _ in range(100):
            c, o = (int(v) for v in rng.integers(1, 9, 2))
            h, w = (int(v) for v in rng.integers(3, 13, 2))
            stride = int(rng.integers(1, 3))
            spec = ConvSpec.create(c, o, 3, stride=stride, rng=rng)
            spec.bias.data[...] = rng.standard_normal(o)
            x = Tensor(rng.standard_normal((int(rng.integers(1, 3)), c, h, w)))
            ref = conv2d(x, spec).data
            n, _, ho, wo = ref.shape
            got = deformable_conv(x, np.zeros((n, 18, ho, wo)), np.ones((n, 9, ho, wo)), spec).data
            assert np.array_equal(got, ref)
    record_property("detail", "100/100 bit-identical")


# ---------------------------------------------------------------------------
# scale search
# ---------------------------------------------------------------------------


@criterion("scale search fidelity")
def test_scale_search_fidelity(record_property):
    seq = synth_sequence("global_shift", {"dx": 24.0}, 2, 1920, 1080, seed=5)
    cur, ref = seq.frame(1).to_array(), seq.frame(0).to_array()
    est = LucasKanade()
    cfg = ScaleSearchConfig(scales=FULL_SCALES)
    assert cfg.scales[0] == 1.0 and cfg.scales[-1] == 5.0

    start = time.perf_counter()
    seq_res = select_scale(cur, ref, cfg, est, workers=1)
    par_res = select_scale(cur, ref, cfg, est, workers=4)
    single = select_scale(cur, ref, ScaleSearchConfig(scales=(1.0,)), est)
    plain = est(cur, ref)
    elapsed = time.perf_counter() - start

    scored = {e.scale: e.psnr for e in seq_res.report}
    record_property(
        "detail",
        f"D_best {seq_res.best_scale:g} ({seq_res.best_psnr:.2f} dB vs {scored[1.0]:.2f} dB at D=1), {elapsed:.1f} s",
    )
    assert seq_res.best_scale > 1
    assert scored[seq_res.best_scale] >= scored[1.0]
    assert seq_res.report == par_res.report
    assert seq_res.best_scale == par_res.best_scale and seq_res.flow.equals(par_res.flow)
    assert single.flow.equals(plain)
    assert elapsed < 120


@criterion("scale search gate")
def test_scale_search_gate(record_property):
    est = LucasKanade()
    for seed in range(3):
        f = synth_sequence("static", {}, 1, 96, 64, seed=seed).frame(0)
        for tau in (10.0, 1.0, 0.5):
            closed = gated_flow(f, f, ScaleSearchConfig(scales=(1.0, 1.25), tau=tau), est)
            assert closed.search is None and closed.scale == 1.0
        opened = gated_flow(f, f, ScaleSearchConfig(scales=(1.0, 1.25), tau=0.0), est)
        assert opened.search is not None and [e.scale for e in opened.search.report] == [1.0, 1.25]
    record_property("detail", "closed at tau in {10, 1, 0.5}, open at tau 0, 3 seeds")


# ---------------------------------------------------------------------------
# quality-aware weights
# ---------------------------------------------------------------------------


@criterion("quality weights exactness")
def test_quality_weights(record_property):
    start = time.perf_counter()
    w = schedule_rollout([33.7] * 71, MrqaState(2048, 2048))
    assert w == [BASE_WEIGHTS[i % 7] for i in range(70)]

    rng = np.random.default_rng(22)
    lams = (256.0, 512.0, 1024.0, 2048.0)
    violations = 0
    for _ in range(10_000):
        lam = lams[int(rng.integers(4))]
        trace = (30 + rng.normal(0, 1 + 4 * rng.random(), int(rng.integers(2, 30)))).tolist()
        s = MrqaState(lam, 2048)
        for i, wt in enumerate(schedule_rollout(trace, MrqaState(lam, 2048))):
            lo, hi = weight_bounds(i, s)
            base = BASE_WEIGHTS[i % 7]
            assert (lo, hi) == (base * (1 - lam / 2048), base * (1 + lam / 2048))
            violations += not (lo <= wt <= hi)
    assert violations == 0

    s = MrqaState(1024, 2048)
    grid = np.linspace(-6, 6, 41)
    for idx in range(7):
        table = np.array([[modulated_weight(idx, a, b, s) for b in grid] for a in grid])
        assert np.all(np.diff(table, axis=0) < 0)  # decreasing in dq_t
        assert np.all(np.diff(table, axis=1) > 0)  # increasing in dq_prev
    elapsed = time.perf_counter() - start
    record_property("detail", f"10^4 traces within bounds, {elapsed:.1f} s")
    assert elapsed < 10


# ---------------------------------------------------------------------------
# BD-rate
# ---------------------------------------------------------------------------


@criterion("BD-rate oracle")
def test_bd_rate_oracle(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(23)
    worst = 0.0
    for b1, q1, b2, q2 in overlapping_pairs(rng, 200):
        got = bd_rate(RDCurve.from_arrays(b1, q1), RDCurve.from_arrays(b2, q2))
        ref = reference_bd_rate(b1.tolist(), q1.tolist(), b2.tolist(), q2.tolist())
        worst = max(worst, abs(got - ref))
    a = RDCurve.from_arrays([0.11, 0.19, 0.37, 0.70], [29.1, 31.4, 33.0, 35.8])
    identical = bd_rate(a, a)
    half = bd_rate(a, RDCurve.from_arrays(a.bpp / 2, a.quality))
    elapsed = time.perf_counter() - start
    record_property("detail", f"worst |diff| {worst:.2e} pct-points, half rate {half:.9f}%, {elapsed:.2f} s")
    assert worst < 0.01
    assert identical == 0.0
    assert abs(half + 50.0) <= 1e-6
    assert elapsed < 10


# ---------------------------------------------------------------------------
# toy alignment learning
# ---------------------------------------------------------------------------

TOY_CONFIG = ExperimentConfig(channels=(8, 16, 24), seed=7, train=TrainConfig(steps=2000))


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    runs = []
    for k in range(2):
        rep = train_toy(TOY_CONFIG, output_dir=str(tmp_path_factory.mktemp(f"toy{k}")))
        runs.append(rep)
    return runs


@criterion("toy alignment learning")
def test_toy_alignment_learning(toy_runs, record_property):
    a, b = toy_runs
    record_property(
        "detail",
        f"aligned/coarse MSE {a.ratio:.4f} ({a.aligned_mse:.4g} / {a.coarse_mse:.4g}), "
        f"{len(a.losses)} steps, {a.wall_clock:.0f} s and {b.wall_clock:.0f} s",
    )
    assert len(a.losses) <= 2000
    assert all(np.isfinite(a.losses))
    assert a.aligned_mse <= 0.8 * a.coarse_mse
    assert a.wall_clock <= 600 and b.wall_clock <= 600


@criterion("toy alignment learning")
def test_toy_training_reproducible(toy_runs):
    a, b = toy_runs
    assert a.losses == b.losses
    assert a.aligned_mse == b.aligned_mse
    with open(a.checkpoint, "rb") as fa, open(b.checkpoint, "rb") as fb:
        assert fa.read() == fb.read()


# ---------------------------------------------------------------------------
# protocol conformance
# ---------------------------------------------------------------------------


@criterion("protocol conformance")
def test_gop_protocol(tmp_path, record_property):
    cfg = ExperimentConfig(channels=(4, 6, 8))
    assert cfg.gop == 32 and cfg.frames == 96
    res = evaluate_sequence(cfg, output_dir=str(tmp_path))
    assert len(res.rows) == 96
    with open(res.csv_path) as fh:
        assert len(fh.read().splitlines()) == 97
    starts = [r["frame_idx"] for r in res.rows if r["gop_start"]]
    assert starts == [0, 32, 64]
    assert [r["frame_idx"] for r in res.rows if r["intra_copy"]] == starts
    record_property("detail", "96 rows, GOP starts 0/32/64")


@criterion("protocol conformance")
def test_padding_protocol(record_property):
    seq = SequenceSpec(1920, 1080, 2, generator="global_shift", params={"dx": 2.0})
    cfg = ExperimentConfig(sequence=seq, frames=2, channels=(4, 4, 4), sme=ScaleSearchConfig.disabled())
    res = evaluate_sequence(cfg)
    assert res.internal_size == (1920, 1088) and res.original_size == (1920, 1080)
    p = res.rows[1]
    assert p["bpp"] == p["bits"] / (1920 * 1080)

    frame = synth_sequence("global_shift", {"dx": 1.0}, 1, 1920, 1080, seed=3).frame(0).to_array()
    padded, size = pad_to_multiple(frame, 16)
    assert padded.shape == (3, 1088, 1920) and size == (1920, 1080)
    assert np.array_equal(crop(padded, size), frame)
    record_property("detail", "1920x1080 -> 1920x1088, bpp on 1920x1080")


@criterion("protocol conformance")
def test_bt709_protocol():
    def planes(y, u, v, hw=(4, 6)):
        h, w = hw
        return Frame((np.full((h, w), y, float), np.full((h // 2, w // 2), u, float), np.full((h // 2, w // 2), v, float)), "YUV420")

    assert np.all(yuv420_to_rgb_bt709(planes(16, 128, 128)).to_array() == 0)
    assert np.all(yuv420_to_rgb_bt709(planes(235, 128, 128)).to_array() == 255)
    rgb = np.random.default_rng(24).integers(0, 256, (3, 32, 48)).astype(float)
    back = yuv444_to_rgb_bt709(rgb_to_yuv444_bt709(Frame.from_array(rgb))).to_array()
    assert np.abs(back - rgb).max() <= 1


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------


@criterion("ablation harness")
def test_ablation_matrix(tmp_path, record_property):
    seq = SequenceSpec(64, 48, 6, generator="global_shift", params={"dx": 2.0})
    train = TrainConfig(steps=6, batch=2, clips=2, holdout_clips=1, log_every=0)
    cfg = ExperimentConfig(sequence=seq, frames=6, gop=4, channels=(4, 6, 8), train=train)
    rows = run_ablation(cfg, str(tmp_path))
    assert [r.config for r in rows] == list(ABLATION_MATRIX) == ["Ma", "Mb", "Mc", "Md", "Me", "Mf"]
    for r in rows:
        assert (r.tsmc, r.mrqa, r.sme) == ABLATION_MATRIX[r.config]
        assert np.isfinite(r.bpp) and np.isfinite(r.psnr)
    assert (tmp_path / "summary.csv").exists() and (tmp_path / "points.csv").exists()
    order = " > ".join(r.config for r in sorted(rows, key=lambda r: -r.psnr))
    record_property("detail", f"six configs complete; ordering {order} (reported, not asserted)")
