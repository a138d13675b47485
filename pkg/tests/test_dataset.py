import numpy as np
import pytest

from vplane.dataset import (ParseError, Sample, SceneConfig, SyntheticSpec, augment_sample, flip_sample,
                            generate_synthetic_scene, load_culane_lanes, load_split,
                            load_vp_annotations, make_seg_target, order_lanes, resize_sample,
                            rotate_sample, scaled_width, write_culane_lanes, write_synthetic_dataset)
from vplane.geometry import ImageDims, Lane, Point2D
from vplane.heatmap import VPAnnotation


def test_load_lanes(tmp_path):
    p = tmp_path / "a.lines.txt"
    p.write_text("10.0 590.0 20.0 580.0\n")
    lanes = load_culane_lanes(p)
    assert len(lanes) == 1
    np.testing.assert_array_equal(lanes[0].points, [[10, 590], [20, 580]])
    (tmp_path / "empty.txt").write_text("")
    assert load_culane_lanes(tmp_path / "empty.txt") == []


def test_load_lanes_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1 2 3 4\n1 2 3\n")
    with pytest.raises(ParseError) as exc:
        load_culane_lanes(p)
    assert exc.value.lineno == 2


def test_load_lanes_drops_short_and_duplicate_vertices(tmp_path, caplog):
    p = tmp_path / "x.txt"
    p.write_text("5 5\n1 1 1 1 2 2\n")
    lanes = load_culane_lanes(p)
    assert len(lanes) == 1 and len(lanes[0]) == 2
    assert "dropped 1" in caplog.text


def test_lanes_round_trip(tmp_path):
    lanes = [Lane([[1.25, 2.5], [3, 4]]), Lane([[7, 8], [9, 10], [11, 12.125]])]
    write_culane_lanes(tmp_path / "l.txt", lanes)
    assert load_culane_lanes(tmp_path / "l.txt") == lanes


def test_vp_records(tmp_path):
    p = tmp_path / "vp.txt"
    p.write_text("# comment\ndriver/a.jpg 488.0 175.5 1\ndriver/b.jpg 1 2 0\n")
    vps = load_vp_annotations(p)
    assert vps["driver/a.jpg"] == VPAnnotation(Point2D(488.0, 175.5), True)
    assert not vps["driver/b.jpg"].visible
    with pytest.raises(OSError):
        load_vp_annotations(tmp_path / "missing.txt")
    p.write_text("a.jpg 1 2\n")
    with pytest.raises(ParseError):
        load_vp_annotations(p)


def _fit_line(points):
    # a x + b y = c through the points, by total least squares
    mu = points.mean(0)
    _, _, vt = np.linalg.svd(points - mu)
    n = vt[-1]
    return n, n @ mu


def test_straight_lanes_meet_at_vp():
    s = generate_synthetic_scene(SceneConfig(num_lanes=3, curvature=0.0, seed=11))
    rows = [_fit_line(lane.points) for lane in s.lanes]
    A = np.array([n for n, _ in rows])
    b = np.array([c for _, c in rows])
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    np.testing.assert_allclose(x, s.vp.point, atol=1e-6)


def test_scene_deterministic_and_labels():
    a = generate_synthetic_scene(SceneConfig(num_lanes=4, curvature=0.1, seed=5))
    b = generate_synthetic_scene(SceneConfig(num_lanes=4, curvature=0.1, seed=5))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.seg, b.seg)
    assert a.lanes == b.lanes and a.vp == b.vp
    assert set(np.unique(a.seg)) == {0, 1, 2, 3, 4}
    # labels run left to right at the bottom row
    bottom = a.seg[-1]
    firsts = [np.nonzero(bottom == k)[0].mean() for k in range(1, 5) if (bottom == k).any()]
    assert firsts == sorted(firsts)


def test_seg_target_examples():
    dims = ImageDims(21, 21)
    assert not make_seg_target([], dims, 3).any()
    seg = make_seg_target([Lane([[10, 0], [10, 20]])], dims, 3)
    assert (seg == 1).sum() == 63
    cross = make_seg_target([Lane([[0, 10], [20, 10]]), Lane([[10, 0], [10, 20]])], dims, 3)
    assert cross[10, 10] == 2


def test_scaled_width():
    assert scaled_width(16, ImageDims(976, 352)) == 16
    assert scaled_width(16, ImageDims(128, 64)) == 2
    assert scaled_width(30, ImageDims(128, 64)) == 4


def _sample(W=100, H=40):
    rng = np.random.default_rng(0)
    lanes = order_lanes([Lane([[60, 39], [40, 5]]), Lane([[20, 39], [28, 5]])])
    seg = make_seg_target(lanes, ImageDims(W, H), 3)
    return Sample(rng.integers(0, 255, (H, W, 3), dtype=np.uint8), lanes,
                  VPAnnotation((10, 20)), "Normal", seg)


def test_flip():
    s = _sample()
    f = flip_sample(s)
    assert f.vp.point == Point2D(89, 20)
    # left-to-right order is preserved after mirroring
    assert f.lanes[0].points[-1, 0] < f.lanes[1].points[-1, 0]
    np.testing.assert_array_equal(f.seg, make_seg_target(f.lanes, s.dims, 3))
    ff = flip_sample(f)
    assert ff.lanes == s.lanes and ff.vp == s.vp
    assert np.array_equal(ff.image, s.image) and np.array_equal(ff.seg, s.seg)


def test_augment_identity_and_limits():
    s = _sample()
    t = augment_sample(s, False, 0.0)
    assert t.lanes == s.lanes and np.array_equal(t.image, s.image)
    with pytest.raises(ValueError):
        augment_sample(s, False, 20.0)


def test_rotation_moves_annotations_with_pixels():
    s = _sample()
    r = rotate_sample(s, 8.0)
    # the rotated segmentation agrees with a rasterization of the rotated lanes
    redo = make_seg_target(r.lanes, s.dims, 3)
    agree = ((r.seg > 0) & (redo > 0)).sum() / max((redo > 0).sum(), 1)
    assert agree > 0.8
    back = rotate_sample(r, -8.0)
    for a, b in zip(back.lanes, s.lanes):
        np.testing.assert_allclose(a.points, b.points, atol=1e-9)


def test_rotation_hides_vp_leaving_canvas():
    s = _sample()
    s.vp = VPAnnotation((0.5, 0.5))
    assert not rotate_sample(s, 10.0).vp.visible


def test_resize():
    s = _sample()
    same = resize_sample(s, s.dims)
    assert same.lanes == s.lanes
    half = resize_sample(s, ImageDims(50, 40))
    for a, b in zip(half.lanes, s.lanes):
        np.testing.assert_allclose(a.points[:, 0], b.points[:, 0] / 2)
        np.testing.assert_allclose(a.points[:, 1], b.points[:, 1])
    assert half.image.shape == (40, 50, 3)


def test_dataset_on_disk(tmp_path):
    spec = SyntheticSpec(ImageDims(64, 32), n_train=6, n_test=3, seed=3)
    write_synthetic_dataset(tmp_path / "a", spec)
    write_synthetic_dataset(tmp_path / "b", spec, workers=2)
    for name in ("manifest.json", "vp.txt", "train.txt", "test.txt", "categories.txt",
                 "images/00004.lines.txt", "images/00004.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    train = load_split(tmp_path / "a", "train")
    test = load_split(tmp_path / "a", "test")
    assert len(train) == 6 and len(test) == 3 and train.dims == ImageDims(64, 32)
    direct = generate_synthetic_scene(SceneConfig(ImageDims(64, 32)), None)
    assert train[0].seg.dtype == direct.seg.dtype
    (tmp_path / "a" / "images" / "00000.lines.txt").unlink()
    assert load_split(tmp_path / "a", "train").skipped == 1
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path / "a", "train", strict=True)
