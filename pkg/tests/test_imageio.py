import os

import numpy as np
import pytest

from adaptalign.imageio import (
    Frame,
    SequenceSpec,
    crop,
    open_sequence,
    pad_to_multiple,
    read_png,
    read_raw_video,
    rgb_to_yuv420_bt709,
    rgb_to_yuv444_bt709,
    synth_sequence,
    write_png,
    write_raw_video,
    yuv420_to_rgb_bt709,
    yuv444_to_rgb_bt709,
)

KR, KB = 0.2126, 0.0722


def yuv_frame(y, u, v, shape, space="YUV420"):
    h, w = shape
    ch = (h // 2, w // 2) if space == "YUV420" else (h, w)
    return Frame((np.full((h, w), y, np.uint8), np.full(ch, u, np.uint8), np.full(ch, v, np.uint8)), space)


def random_420(rng, w, h):
    return Frame(
        (
            rng.integers(0, 256, (h, w), dtype=np.uint8),
            rng.integers(0, 256, (h // 2, w // 2), dtype=np.uint8),
            rng.integers(0, 256, (h // 2, w // 2), dtype=np.uint8),
        ),
        "YUV420",
    )


# ---------------------------------------------------------------------------
# raw files
# ---------------------------------------------------------------------------


def test_raw_size_arithmetic(tmp_path, rng):
    frames = [random_420(rng, 416, 240) for _ in range(2)]
    path = str(tmp_path / "seq.yuv")
    write_raw_video(path, frames)
    assert os.path.getsize(path) == 2 * 416 * 240 * 3 // 2
    got = list(read_raw_video(SequenceSpec(416, 240, 2, path=path)))
    assert len(got) == 2
    assert all(a.equals(b) for a, b in zip(frames, got))


def test_raw_truncated_names_sizes(tmp_path, rng):
    path = str(tmp_path / "seq.yuv")
    write_raw_video(path, [random_420(rng, 16, 8) for _ in range(2)])
    with open(path, "r+b") as fh:
        fh.truncate(2 * 192 - 1)
    with pytest.raises(ValueError, match=r"384 bytes.*383 bytes"):
        list(read_raw_video(SequenceSpec(16, 8, 2, path=path)))


def test_raw_odd_dimensions(tmp_path):
    path = str(tmp_path / "x.yuv")
    open(path, "wb").close()
    with pytest.raises(ValueError, match="even"):
        list(read_raw_video(SequenceSpec(15, 8, 2, path=path)))


def test_open_sequence_warns_on_short_file(tmp_path, rng):
    path = str(tmp_path / "seq.yuv")
    write_raw_video(path, [random_420(rng, 16, 8) for _ in range(3)])
    with pytest.warns(UserWarning, match="fewer"):
        frames = list(open_sequence(SequenceSpec(16, 8, 5, path=path)))
    assert len(frames) == 3 and frames[0].color_space == "RGB"


def test_sequence_spec_validation():
    with pytest.raises(ValueError):
        SequenceSpec(16, 16, 1, generator="static")
    with pytest.raises(ValueError):
        SequenceSpec(16, 16, 4)


def test_png_round_trip(tmp_path, rng):
    arr = rng.integers(0, 256, (3, 9, 13)).astype(np.uint8)
    path = str(tmp_path / "f.png")
    write_png(path, Frame.from_array(arr))
    assert np.array_equal(read_png(path).to_array(), arr)


def test_frame_rejects_odd_420_and_out_of_range():
    with pytest.raises(ValueError, match="even"):
        Frame((np.zeros((3, 4)), np.zeros((1, 2)), np.zeros((1, 2))), "YUV420")
    with pytest.raises(ValueError, match="0, 255"):
        Frame.from_array(np.full((3, 2, 2), 256.0))


# ---------------------------------------------------------------------------
# BT.709
# ---------------------------------------------------------------------------


def test_limited_range_black_and_white():
    assert np.all(yuv420_to_rgb_bt709(yuv_frame(16, 128, 128, (4, 6))).to_array() == 0)
    assert np.all(yuv420_to_rgb_bt709(yuv_frame(235, 128, 128, (4, 6))).to_array() == 255)


def _round(x):
    return np.sign(x) * np.floor(abs(x) + 0.5)


def scalar_yuv420_to_rgb(f):
    """Per-pixel loop: co-sited bilinear chroma, then the limited-range matrix."""
    y, u, v = (p.astype(float) for p in f.planes)
    h, w = y.shape
    ch, cw = u.shape
    out = np.zeros((3, h, w))

    def chroma(p, i, j):
        i0, j0 = i // 2, j // 2
        i1 = min(i0 + 1, ch - 1) if i % 2 else i0
        j1 = min(j0 + 1, cw - 1) if j % 2 else j0
        return (p[i0, j0] + p[i0, j1] + p[i1, j0] + p[i1, j1]) / 4.0

    for i in range(h):
        for j in range(w):
            yn = (y[i, j] - 16.0) / 219.0
            pb = (chroma(u, i, j) - 128.0) / 224.0
            pr = (chroma(v, i, j) - 128.0) / 224.0
            r = yn + 2.0 * (1.0 - KR) * pr
            b = yn + 2.0 * (1.0 - KB) * pb
            g = (yn - KR * r - KB * b) / (1.0 - KR - KB)
            for c, val in enumerate((r, g, b)):
                out[c, i, j] = min(max(_round(val * 255.0), 0.0), 255.0)
    return out


def test_yuv420_conversion_matches_scalar_oracle(rng):
    f = random_420(rng, 12, 10)
    assert np.array_equal(yuv420_to_rgb_bt709(f).to_array(), scalar_yuv420_to_rgb(f))


def test_constant_chroma_upsampling_exact():
    f = yuv_frame(100, 90, 170, (6, 8))
    rgb = yuv420_to_rgb_bt709(f).to_array()
    assert np.all(rgb == rgb[:, :1, :1])


def test_rgb_to_yuv444_anchors():
    black = rgb_to_yuv444_bt709(Frame.from_array(np.zeros((3, 2, 2))))
    assert [int(p[0, 0]) for p in black.planes] == [16, 128, 128]
    gray = rgb_to_yuv444_bt709(Frame.from_array(np.full((3, 2, 2), 128.0)))
    assert int(gray.planes[1][0, 0]) == 128 and int(gray.planes[2][0, 0]) == 128


def test_rgb_yuv444_round_trip_within_one(rng):
    rgb = rng.integers(0, 256, (3, 64, 64)).astype(float)
    back = yuv444_to_rgb_bt709(rgb_to_yuv444_bt709(Frame.from_array(rgb))).to_array()
    assert np.abs(back - rgb).max() <= 1


def test_conversion_rejects_wrong_space(rng):
    with pytest.raises(ValueError):
        yuv420_to_rgb_bt709(Frame.from_array(np.zeros((3, 2, 2))))
    with pytest.raises(ValueError):
        rgb_to_yuv444_bt709(yuv_frame(16, 128, 128, (2, 2), "YUV444"))


def test_rgb_to_yuv420_shapes(rng):
    f = rgb_to_yuv420_bt709(Frame.from_array(rng.integers(0, 256, (3, 8, 6)).astype(float)))
    assert f.planes[0].shape == (8, 6) and f.planes[1].shape == (4, 3)


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------


def test_pad_1080p_to_1088():
    arr = np.zeros((3, 1080, 1920), dtype=np.uint8)
    padded, size = pad_to_multiple(arr, 16)
    assert padded.shape == (3, 1088, 1920) and size == (1920, 1080)


def test_pad_already_multiple_unchanged(rng):
    f = Frame.from_array(rng.integers(0, 256, (3, 240, 416)).astype(np.uint8))
    padded, size = pad_to_multiple(f, 16)
    assert padded.equals(f) and size == (416, 240)


def test_pad_replicates_edges_and_crop_inverts(rng):
    arr = rng.integers(0, 256, (3, 21, 18)).astype(np.uint8)
    padded, size = pad_to_multiple(arr, 16)
    assert padded.shape == (3, 32, 32)
    assert np.array_equal(padded[:, 21:, :18], np.repeat(arr[:, -1:, :], 11, axis=1))
    assert np.array_equal(padded[:, :21, 18:], np.repeat(arr[:, :, -1:], 14, axis=2))
    assert np.array_equal(crop(padded, size), arr)


def test_pad_crop_frame_420(rng):
    f = random_420(rng, 20, 14)
    padded, size = pad_to_multiple(f, 16)
    assert padded.size == (32, 16) and padded.planes[1].shape == (8, 16)
    assert crop(padded, size).equals(f)


# ---------------------------------------------------------------------------
# synthetic sequences
# ---------------------------------------------------------------------------


def test_static_frames_identical():
    frames = [f.to_array() for f in synth_sequence("static", frames=4, width=32, height=24)]
    assert all(np.array_equal(frames[0], f) for f in frames[1:])


def test_global_shift_interior_exact():
    seq = synth_sequence("global_shift", {"dx": 3, "dy": 0}, frames=4, width=48, height=32, seed=5)
    f0 = seq.frame(0).to_array()
    for k in range(1, 4):
        fk = seq.frame(k).to_array()
        assert np.array_equal(fk[:, :, 3 * k :], f0[:, :, : 48 - 3 * k])


def test_synthetic_truth_matches_shift():
    seq = synth_sequence("global_shift", {"dx": 3, "dy": -2}, frames=2, width=16, height=16)
    truth = seq.true_flow()
    assert np.all(truth.vx == -3) and np.all(truth.vy == 2)


def test_seeded_regeneration_byte_identical():
    a = [f.to_array().tobytes() for f in synth_sequence("affine", {"theta": 0.02, "dx": 1.5}, 3, 40, 24, seed=9)]
    b = [f.to_array().tobytes() for f in synth_sequence("affine", {"theta": 0.02, "dx": 1.5}, 3, 40, 24, seed=9)]
    assert a == b


def test_motion_larger_than_frame_rejected():
    with pytest.raises(ValueError, match="exceeds"):
        synth_sequence("global_shift", {"dx": 40}, frames=2, width=32, height=32)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown"):
        synth_sequence("zoom_blur")
