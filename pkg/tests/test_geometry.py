import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_polyline
from oracles import brute_force_raster, exhaustive_match
from vplane.geometry import (DimensionError, ImageDims, InvalidConfigError, InvalidLaneError, Lane,
                             MatchConfig, iou_matrix, mask_iou, match_iou_matrix, match_lanes,
                             rasterize_lane)


def test_lane_validation():
    with pytest.raises(InvalidLaneError):
        Lane([[1, 2]])
    with pytest.raises(InvalidLaneError):
        Lane([[1, 2], [1, 2], [3, 4]])
    with pytest.raises(InvalidLaneError):
        Lane([[0, 0], [np.nan, 1]])
    lane = Lane([[0, 0], [3, 4]])
    with pytest.raises(ValueError):
        lane.points[0, 0] = 5


def test_image_dims():
    with pytest.raises(InvalidConfigError):
        ImageDims(1, 10)
    d = ImageDims(4, 3)
    assert d.shape == (3, 4) and d.diagonal == 5.0


def test_vertical_segment_width_3():
    # centers within 1.5 px of x=5 -> columns 4, 5, 6 on rows 0..9
    m = rasterize_lane(Lane([[5, 0], [5, 9]]), 3, ImageDims(10, 10))
    expected = np.zeros((10, 10), bool)
    expected[:, 4:7] = True
    np.testing.assert_array_equal(m, expected)


def test_endpoint_caps_are_round():
    m = rasterize_lane(Lane([[5, 5], [5, 6]]), 4, ImageDims(12, 12))
    # (3, 5) is 2 px above the top endpoint: on the cap boundary, included
    assert m[3, 5]
    # (3, 4) is sqrt(5) > 2 px from the segment
    assert not m[3, 4]


def test_lane_outside_canvas_is_empty():
    m = rasterize_lane(Lane([[-50, -50], [-40, -60]]), 30, ImageDims(16, 16))
    assert not m.any()


@pytest.mark.parametrize("trial", range(20))
def test_raster_matches_oracle(trial):
    rng = np.random.default_rng(trial)
    w, h = int(rng.integers(4, 40)), int(rng.integers(4, 40))
    pts = random_polyline(rng, w, h)
    width = int(rng.integers(1, 12))
    np.testing.assert_array_equal(rasterize_lane(Lane(pts), width, ImageDims(w, h)),
                                  brute_force_raster(pts, width, w, h))


def test_mask_iou():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    assert mask_iou(a, b) == 0.0
    a[0, :2] = True
    b[0, 1:3] = True
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    with pytest.raises(DimensionError):
        mask_iou(a, np.zeros((3, 3), bool))


def test_two_preds_one_gt_keeps_best():
    # IoUs 0.6 and 0.7 against one gt: the 0.7 pair is the match
    ious = np.array([[0.6], [0.7]])
    assert match_iou_matrix(ious, 0.5) == [(1, 0)]


def test_threshold_is_strict():
    assert match_iou_matrix(np.array([[0.5]]), 0.5) == []
    assert match_iou_matrix(np.array([[0.5000001]]), 0.5) == [(0, 0)]


def test_optimal_not_greedy():
    # greedy on the largest entry would take (0, 0) and leave one match
    ious = np.array([[0.9, 0.8], [0.85, 0.0]])
    assert match_iou_matrix(ious, 0.5) == [(0, 1), (1, 0)]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 2 ** 31))
def test_matching_matches_enumeration(n, m, seed):
    rng = np.random.default_rng(seed)
    ious = rng.uniform(0, 1, (n, m)) * (rng.uniform(size=(n, m)) < 0.7)
    total, pairs = exhaustive_match(ious, 0.5)
    got = match_iou_matrix(ious, 0.5)
    assert sum(ious[r, c] for r, c in got) == pytest.approx(total, abs=1e-12)
    assert got == pairs


def test_match_lanes_identical_sets():
    dims = ImageDims(64, 32)
    lanes = [Lane([[10, 31], [30, 5]]), Lane([[50, 31], [34, 5]])]
    res = match_lanes(lanes, lanes, MatchConfig(4, 0.5), dims)
    assert (res.tp, res.fp, res.fn) == (2, 0, 0)
    assert res.pairs == [(0, 0), (1, 1)]


def test_match_lanes_counts():
    dims = ImageDims(64, 32)
    gts = [Lane([[10, 31], [30, 5]])]
    preds = [Lane([[11, 31], [31, 5]]), Lane([[60, 31], [40, 5]])]
    res = match_lanes(preds, gts, MatchConfig(6, 0.5), dims)
    assert (res.tp, res.fp, res.fn) == (1, 1, 0)
    assert match_lanes([], gts, MatchConfig(), dims)[:3] == (0, 0, 1)


def test_iou_matrix_symmetry():
    rng = np.random.default_rng(3)
    dims = ImageDims(32, 32)
    lanes = [Lane(random_polyline(rng, 32, 32)) for _ in range(4)]
    m = iou_matrix(lanes, lanes, 5, dims)
    np.testing.assert_allclose(m, m.T)


def test_vertical_lane_21x21_oracle():
    m = rasterize_lane(Lane([[10, 0], [10, 20]]), 3, ImageDims(21, 21))
    assert m.sum() == 63
    assert set(np.nonzero(m)[1]) == {9, 10, 11}
    np.testing.assert_array_equal(m, brute_force_raster([(10, 0), (10, 20)], 3, 21, 21))
    np.testing.assert_array_equal(m, rasterize_lane(Lane([[10, 0], [10, 20]]), 3, ImageDims(21, 21)))


def test_iou_examples():
    a = np.zeros((3, 4), bool)
    b = np.zeros((3, 4), bool)
    a[0] = True
    b[0, 2:] = True
    b[1, :2] = True
    assert mask_iou(a, b) == pytest.approx(2 / 6)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0


def test_below_threshold_pair():
    assert match_iou_matrix(np.array([[0.4]]), 0.5) == []
