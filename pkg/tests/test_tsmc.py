import numpy as np
import pytest

from adaptalign.flow import FlowField, rescale_flow, warp_tensor
from adaptalign.imageio import synth_sequence
from adaptalign.numerics import ConvSpec, Tensor, default_dtype, finite_diff_check, ops
from adaptalign.tsmc import (
    MASK_INIT,
    FgdParams,
    OffsetMask,
    PyramidFeatures,
    build_feature_pyramid,
    deformable_align,
    identity_conv,
    level_flows,
    load_checkpoint,
    params_from_checkpoint,
    predict_offsets_masks,
    refine_contexts,
    save_checkpoint,
    tsmc_forward,
)


@pytest.fixture(autouse=True)
def _double():
    with default_dtype(np.float64):
        yield


def randomize(params, rng, scale=0.1):
    for t in params.named_parameters().values():
        t.data[...] = rng.normal(0, scale, t.shape)


def test_pyramid_shapes(rng):
    p = FgdParams.init((4, 6, 8))
    feats = build_feature_pyramid(rng.uniform(0, 255, (3, 64, 64)), p)
    assert [f.shape for f in feats] == [(1, 4, 64, 64), (1, 6, 32, 32), (1, 8, 16, 16)]


def test_pyramid_zero_input_zero_features():
    p = FgdParams.init((4, 4, 4))
    for t in p.named_parameters().values():
        if t.ndim == 1:
            t.data[...] = 0
    feats = build_feature_pyramid(np.zeros((3, 16, 16)), p)
    assert all(not f.data.any() for f in feats)


def test_pyramid_rejects_indivisible_size():
    with pytest.raises(ValueError, match="divisible by 4"):
        build_feature_pyramid(np.zeros((3, 18, 16)), FgdParams.init((2, 2, 2)))


def test_pyramid_container_validation():
    with pytest.raises(ValueError):
        PyramidFeatures([Tensor(np.zeros((1, 1, 8, 8)))] * 2)
    with pytest.raises(ValueError, match="halve"):
        PyramidFeatures([Tensor(np.zeros((1, 1, 8, 8)))] * 3)


def test_pyramid_gradients(rng):
    p = FgdParams.init((2, 3, 4), seed=1)
    randomize(p, rng, 0.3)
    x = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)), requires_grad=True)

    def loss():
        feats = build_feature_pyramid(x, p)
        return ops.add(ops.add(ops.sum(ops.mul(feats[0], feats[0])), ops.sum(feats[1])), ops.sum(feats[2]))

    params = [p.pyramid_convs[s].weight for s in range(3)] + [p.pyramid_res[2].conv2.weight, x]
    rep = finite_diff_check(loss, params, rng=rng, max_coords=25)
    assert rep.passed(1e-4), str(rep)


def test_hidden_branch_channel_layout():
    p = FgdParams.init((4, 4, 4), groups=2)
    for lp in p.levels:
        assert lp.hidden_conv.out_channels == 2 * 2 * 9 + 2 * 9
        assert lp.fine_conv.out_channels == 2 * 2 * 9


def test_init_offsets_zero_mask_half():
    p = FgdParams.init((4, 4, 4))
    feat = Tensor(np.random.default_rng(0).standard_normal((1, 4, 8, 8)))
    om = predict_offsets_masks(feat, FlowField.zeros(8, 8), p.levels[0], 0)
    assert not om.offsets.data.any()
    assert np.all(om.mask.data == MASK_INIT)


@pytest.mark.parametrize("groups", [1, 2])
def test_flow_replication_into_every_tap(rng, groups):
    p = FgdParams.init((4, 4, 4), groups=groups)
    feat = Tensor(rng.standard_normal((1, 4, 8, 8)))
    om = predict_offsets_masks(feat, FlowField.constant(8, 8, 2.5, 0.0), p.levels[0], 0, groups)
    off = om.offsets.data.reshape(1, groups * 9, 2, 8, 8)
    # interior only: the fine conv is zero-padded at the border
    np.testing.assert_allclose(off[:, :, 0, 1:-1, 1:-1], 2.5, atol=1e-12)
    np.testing.assert_allclose(off[:, :, 1], 0.0, atol=1e-12)


def test_predict_rejects_flow_resolution_mismatch(rng):
    p = FgdParams.init((4, 4, 4))
    with pytest.raises(ValueError, match="resolution"):
        predict_offsets_masks(Tensor(rng.standard_normal((1, 4, 8, 8))), FlowField.zeros(4, 4), p.levels[0], 0)


def test_predict_offsets_masks_gradients(rng):
    p = FgdParams.init((4, 4, 4), seed=2)
    randomize(p, rng, 0.2)
    lp = p.levels[0]
    feat = Tensor(rng.standard_normal((1, 4, 6, 6)), requires_grad=True)
    flow = Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)) + 0.37, requires_grad=True)

    def loss():
        om = predict_offsets_masks(feat, flow, lp, 0)
        return ops.add(ops.sum(om.offsets), ops.sum(om.mask))

    inputs = [feat, flow, lp.hidden_res.conv1.weight, lp.hidden_res.conv2.weight, lp.hidden_conv.weight, lp.fine_conv.weight, lp.hidden_conv.bias]
    rep = finite_diff_check(loss, inputs, rng=rng, max_coords=30, eps=1e-6)
    assert rep.passed(1e-4), str(rep)


def test_mask_in_unit_interval(rng):
    p = FgdParams.init((4, 4, 4))
    randomize(p, rng, 0.2)
    feat = Tensor(rng.standard_normal((1, 4, 8, 8)))
    om = predict_offsets_masks(feat, FlowField.zeros(8, 8), p.levels[0], 0)
    assert np.all(om.mask.data > 0) and np.all(om.mask.data < 1)
    # logits far beyond +-37 round to exactly 0 or 1 in double precision
    randomize(p, rng, 1.0)
    om = predict_offsets_masks(Tensor(feat.data * 5), FlowField.zeros(8, 8), p.levels[0], 0)
    assert np.all(om.mask.data >= 0) and np.all(om.mask.data <= 1)
    assert np.all(np.isfinite(om.offsets.data)) and np.all(np.isfinite(om.mask.data))


def test_align_identity_degeneration(rng):
    lp = FgdParams.init((4, 4, 4)).levels[0]
    lp.dcn = identity_conv(4)
    feat = Tensor(rng.standard_normal((1, 4, 8, 8)))
    om = OffsetMask(Tensor(np.zeros((1, 18, 8, 8))), Tensor(np.ones((1, 9, 8, 8))), 0)
    assert np.array_equal(deformable_align(feat, om, lp).data, feat.data)


def test_align_shift_oracle(rng):
    lp = FgdParams.init((3, 3, 3)).levels[0]
    lp.dcn = identity_conv(3)
    base = rng.standard_normal((1, 3, 10, 12))
    shifted = np.zeros_like(base)
    shifted[..., 2:] = base[..., :-2]  # content moved right by 2
    off = np.zeros((1, 18, 10, 12))
    off[:, 0::2] = -2.0
    om = OffsetMask(Tensor(off), Tensor(np.ones((1, 9, 10, 12))), 0)
    out = deformable_align(Tensor(base), om, lp).data
    assert np.array_equal(out[..., 2:], shifted[..., 2:])


def test_zero_mask_gives_bias_only(rng):
    lp = FgdParams.init((4, 4, 4)).levels[0]
    lp.dcn = ConvSpec.create(4, 4, 3, rng=rng)
    lp.dcn.bias.data[...] = [0.5, -1.0, 2.0, 0.0]
    om = OffsetMask(Tensor(rng.uniform(-2, 2, (1, 18, 6, 6))), Tensor(np.zeros((1, 9, 6, 6))), 0)
    out = deformable_align(Tensor(rng.standard_normal((1, 4, 6, 6))), om, lp).data
    assert np.array_equal(out, np.broadcast_to(lp.dcn.bias.data[None, :, None, None], out.shape))


def test_refine_zero_weights_identity_and_shapes(rng):
    p = FgdParams.init((2, 3, 4))
    ctx = [Tensor(rng.standard_normal((1, c, s, s))) for c, s in zip((2, 3, 4), (8, 4, 2))]
    out = refine_contexts(ctx, p)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(ctx, out))
    randomize(p, rng)
    out = refine_contexts(ctx, p)
    assert [o.shape for o in out] == [c.shape for c in ctx]
    with pytest.raises(ValueError):
        refine_contexts(ctx[:2], p)


def test_refine_gradients(rng):
    p = FgdParams.init((2, 2, 2), refine_blocks=2)
    randomize(p, rng, 0.3)
    ctx = [Tensor(rng.standard_normal((1, 2, s, s)), requires_grad=True) for s in (8, 4, 2)]
    rb = p.levels[0].refine
    rep = finite_diff_check(
        lambda: ops.sum(ops.mul(refine_contexts(ctx, p)[0], refine_contexts(ctx, p)[0])),
        [ctx[0], rb[0].conv1.weight, rb[1].conv2.weight, rb[1].conv2.bias],
        rng=rng,
        max_coords=40,
    )
    assert rep.passed(1e-4), str(rep)


def test_level_flows_scale_constant_fields():
    flows = level_flows(FlowField.constant(32, 16, 4.0, -2.0))
    assert [f.size for f in flows] == [(32, 16), (16, 8), (8, 4)]
    for s, f in enumerate(flows):
        assert np.all(f.vx == 4.0 / 2**s) and np.all(f.vy == -2.0 / 2**s)


def test_init_forward_is_coarse_warp(rng):
    """At initialisation the second stage reproduces the flow-guided warp exactly."""
    p = FgdParams.init((4, 4, 4), seed=3)
    ref = rng.uniform(0, 255, (3, 32, 32))
    ys, xs = np.mgrid[0:32, 0:32] / 32.0
    flow = FlowField(1.5 * np.sin(3 * xs) + 0.3, np.cos(2 * ys) - 0.5)
    res = tsmc_forward(ref, flow, p)
    for s in range(3):
        np.testing.assert_allclose(res.refined[s].data, res.coarse[s].data, atol=1e-12)


def test_zero_flow_forward_reproduces_pyramid(rng):
    p = FgdParams.init((4, 4, 4))
    ref = rng.uniform(0, 255, (3, 16, 16))
    res = tsmc_forward(ref, FlowField.zeros(16, 16), p)
    for s in range(3):
        np.testing.assert_allclose(res.refined[s].data, res.pyramid[s].data, atol=1e-12)


def test_forward_deterministic(rng):
    p = FgdParams.init((4, 4, 4), seed=1)
    randomize(p, rng, 0.1)
    ref = rng.uniform(0, 255, (3, 16, 16))
    flow = FlowField(rng.uniform(-2, 2, (16, 16)), rng.uniform(-2, 2, (16, 16)))
    a = tsmc_forward(ref, flow, p)
    b = tsmc_forward(ref, flow, p)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.refined, b.refined))


def test_forward_rejects_flow_size(rng):
    with pytest.raises(ValueError, match="does not match"):
        tsmc_forward(np.zeros((3, 16, 16)), FlowField.zeros(8, 8), FgdParams.init((2, 2, 2)))


def test_coarse_level_equals_warp_of_pyramid(rng):
    p = FgdParams.init((2, 2, 2))
    ref = rng.uniform(0, 255, (3, 16, 16))
    flow = FlowField.constant(16, 16, 2.0, 0.0)
    res = tsmc_forward(ref, flow, p)
    v2 = rescale_flow(flow, 0.5)
    assert np.array_equal(res.coarse[1].data, warp_tensor(res.pyramid[1], v2).data)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    p = FgdParams.init((2, 3, 4), seed=5)
    randomize(p, rng)
    path = str(tmp_path / "p.fgd")
    tensors = {k: v.data for k, v in p.named_parameters().items()}
    tensors["extra.thing"] = np.arange(6.0).reshape(2, 3)
    save_checkpoint(path, tensors, p.meta())
    q, extra, meta = params_from_checkpoint(path)
    assert meta == p.meta()
    assert list(extra) == ["extra.thing"]
    for name, t in q.named_parameters().items():
        assert np.array_equal(t.data, p.named_parameters()[name].data)


def test_checkpoint_layout(tmp_path):
    path = str(tmp_path / "c.fgd")
    save_checkpoint(path, {"a": np.array([1.5, -2.0])}, {"k": 1})
    raw = open(path, "rb").read()
    assert raw.startswith(b"FGDWARP\x00")
    assert raw.endswith(np.array([1.5, -2.0], dtype="<f8").tobytes())
    tensors, meta = load_checkpoint(path)
    assert meta == {"k": 1} and np.array_equal(tensors["a"], [1.5, -2.0])


def test_checkpoint_rejects_garbage(tmp_path):
    path = str(tmp_path / "bad.fgd")
    with open(path, "wb") as fh:
        fh.write(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_load_state_rejects_shape_mismatch():
    p = FgdParams.init((2, 2, 2))
    state = {k: v.data for k, v in FgdParams.init((2, 2, 4)).named_parameters().items()}
    with pytest.raises(ValueError, match="shape"):
        p.load_state(state)


def test_parameter_groups_partition():
    p = FgdParams.init((2, 2, 2))
    groups = [p.parameter_group(g) for g in ("pyramid", "motion", "context")]
    ids = [id(t) for g in groups for t in g]
    assert len(ids) == len(set(ids)) == len(p.named_parameters())


def test_coarse_offset_corrects_wrong_flow(rng):
    """A coarse-offset bias of -1 px fixes a flow that is 1 px short."""
    seq = synth_sequence("global_shift", {"dx": 2}, frames=2, width=32, height=32, seed=1)
    ref, cur = seq.frame(0), seq.frame(1)
    p = FgdParams.init((3, 3, 3))
    target = build_feature_pyramid(cur, p)
    # deliberately wrong flow, corrected by the coarse-offset bias
    flow = FlowField.constant(32, 32, -1.0, 0.0)
    lp = p.levels[0]
    lp.hidden_conv.bias.data[0:18:2] = -1.0
    res = tsmc_forward(ref, flow, p)
    inner = (Ellipsis, slice(4, -4), slice(4, -4))
    err_aligned = np.mean((res.refined[0].data - target[0].data)[inner] ** 2)
    err_coarse = np.mean((res.coarse[0].data - target[0].data)[inner] ** 2)
    assert err_aligned < 1e-20 < err_coarse
