import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from flowvid.errors import ShapeError
from flowvid.flowdata import FlowRecord, make_synthetic
from flowvid.representation import (DegenerateShapeWarning, FlowImage, choose_factors,
                                    export_png, pack_video, reshape_flow)


def brute_force_factors(f):
    pairs = [(k, f // k) for k in range(1, f + 1) if f % k == 0 and k >= f // k]
    return min(pairs, key=lambda p: p[0] - p[1])


@pytest.mark.parametrize("f,expected", [(48, (8, 6)), (16, (4, 4)), (36, (6, 6))])
def test_choose_factors_examples(f, expected):
    assert choose_factors(f) == expected
    assert brute_force_factors(f) == expected


def test_choose_factors_all_sizes_up_to_4096():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateShapeWarning)
        for f in range(1, 4097):
            k, w = choose_factors(f)
            assert k * w == f and k >= w
            assert (k, w) == brute_force_factors(f)


def test_prime_feature_count_warns():
    with pytest.warns(DegenerateShapeWarning):
        assert choose_factors(47) == (47, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert choose_factors(3) == (3, 1)


def test_reshape_small_row_major():
    img = reshape_flow(np.arange(1, 7), 2, 3)
    np.testing.assert_array_equal(img.pixels, [[1, 2, 3], [4, 5, 6]])


def test_reshape_rejects_wrong_factors():
    with pytest.raises(ShapeError, match="48.*7x6"):
        reshape_flow(np.zeros(48), 7, 6)


def test_reshape_row_j_is_slice_of_source():
    x = np.random.default_rng(0).uniform(size=48)
    img = reshape_flow(x, 8, 6)
    for j in range(8):
        # 1-based: row j+1 holds x[(j)W + 1 .. (j+1)W]
        np.testing.assert_array_equal(img.pixels[j], x[j * 6:(j + 1) * 6])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64),
                min_size=48, max_size=48))
def test_reshape_round_trip_bitwise(values):
    x = np.array(values)
    assert reshape_flow(x, 8, 6).flatten().tobytes() == x.tobytes()


def test_pack_video_shapes():
    recs = [FlowRecord(np.full(48, i / 3), 0) for i in range(3)]
    assert pack_video(recs, 8, 6).frames.shape == (3, 1, 8, 6)
    assert pack_video([], 8, 6).frames.shape == (0, 1, 8, 6)


def test_pack_video_frame_equals_reshaped_record():
    recs, _ = make_synthetic(10, 50, 48, seed=7)
    video = pack_video(recs, 8, 6, dtype=np.float64)
    assert video.frames.shape == (500, 1, 8, 6)
    np.testing.assert_array_equal(video.frames[17, 0], reshape_flow(recs[17].features, 8, 6).pixels)
    for n in range(0, 500, 37):
        np.testing.assert_array_equal(video.frames[n, 0].ravel(), recs[n].features)
    assert video.labels.tolist() == [r.label_id for r in recs]


def test_pack_video_permutation_equivariance():
    recs, _ = make_synthetic(3, 4, 48, seed=1)
    perm = np.random.default_rng(0).permutation(len(recs))
    a = pack_video(recs, dtype=np.float64)
    b = pack_video([recs[i] for i in perm], dtype=np.float64)
    np.testing.assert_array_equal(a.frames[perm], b.frames)


def test_pack_video_heterogeneous_records_names_index():
    recs = [FlowRecord(np.zeros(48), 0), FlowRecord(np.zeros(47), 0)]
    with pytest.raises(ShapeError, match="record 1"):
        pack_video(recs)


@pytest.mark.parametrize("value,level", [(0.0, 0), (1.0, 255), (0.5, 128)])
def test_export_png_gray_levels(tmp_path, value, level):
    p = tmp_path / "img.png"
    export_png(FlowImage(np.full((8, 6), value)), p)
    with Image.open(p) as im:
        assert im.mode == "L"
        assert im.size == (6, 8)
        assert np.all(np.asarray(im) == level)


def test_export_png_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        export_png(FlowImage(np.full((2, 2), 1.5)), tmp_path / "x.png")


def test_export_png_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        export_png(FlowImage(np.zeros((8, 6))), tmp_path / "missing" / "x.png")
