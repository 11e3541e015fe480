import numpy as np
import pytest

from rangefree_mvs.errors import EmptyCloud, ShapeMismatch
from rangefree_mvs.fusion_eval import PointCloud, evaluate, filter_depths, fuse_cloud, nearest_distances
from rangefree_mvs.geometry import DepthMap
from rangefree_mvs.synthdata import SceneSpec, make_scene


@pytest.fixture(scope="module")
def plane():
    return make_scene(SceneSpec(primitive="plane", width=48, height=32), seed=0)


def test_identical_clouds_score_perfectly():
    pts = np.random.default_rng(0).normal(size=(500, 3))
    r = evaluate(PointCloud(pts), PointCloud(pts.copy()))
    assert r.acc == 0.0 and r.comp == 0.0 and r.overall == 0.0 and r.fscore == 1.0


def test_hand_computed_metrics():
    pred = PointCloud([[0.0, 0.0, 0.0]])
    gt = PointCloud([[1.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    r = evaluate(pred, gt, tau=1.5)
    assert (r.acc, r.comp, r.overall) == (1.0, 2.0, 1.5)
    assert (r.precision, r.recall) == (1.0, 0.5)
    assert r.fscore == pytest.approx(2 / 3, abs=1e-15)


def test_outlier_cap_drops_far_points():
    pred = PointCloud([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]])
    gt = PointCloud([[0.0, 0.0, 0.1]])
    r = evaluate(pred, gt, outlier_cap=1.0)
    assert r.acc == pytest.approx(0.1)
    assert evaluate(PointCloud([[50.0, 0, 0]]), gt, outlier_cap=1.0).acc == 1.0


def test_metric_report_ranges_and_text():
    rng = np.random.default_rng(1)
    r = evaluate(PointCloud(rng.normal(size=(200, 3))), PointCloud(rng.normal(size=(300, 3))), tau=0.3)
    assert r.acc >= 0 and r.comp >= 0 and 0 <= r.fscore <= 1
    assert '"overall"' in r.to_text()


def test_empty_cloud_rejected():
    with pytest.raises(EmptyCloud):
        evaluate(PointCloud(np.zeros((0, 3))), PointCloud([[0.0, 0.0, 0.0]]))


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud([[np.nan, 0.0, 0.0]])
    with pytest.raises(ShapeMismatch):
        PointCloud(np.zeros((3, 3)), np.zeros((2, 3)))


@pytest.mark.parametrize("seed", [0, 1])
def test_tree_matches_brute_force_exactly(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3000, 3)), rng.uniform(-2, 2, size=(2000, 3))
    assert np.array_equal(nearest_distances(a, b), nearest_distances(a, b, brute_force=True))


def test_tree_handles_tiny_reference():
    q = np.random.default_rng(2).normal(size=(10, 3))
    ref = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    assert np.array_equal(nearest_distances(q, ref), nearest_distances(q, ref, brute_force=True))


def test_perfect_depths_fuse_onto_plane(plane):
    masks = filter_depths(plane.gt.depths, plane.views)
    for m, d in zip(masks, plane.gt.depths):
        assert m.sum() > 0.7 * d.mask.sum()  # border pixels outside the overlap drop out
    cloud = fuse_cloud(plane.gt.depths, masks, plane.views)
    resid = np.abs((cloud.points - plane.surface.p0) @ plane.surface.n)
    assert (resid < 1e-6).mean() >= 0.99
    assert cloud.colors is not None and len(cloud.colors) == len(cloud)


def test_filter_rejects_inconsistent_depths(plane):
    depths = list(plane.gt.depths)
    bad = depths[0].values.copy()
    bad[10:20, 10:30] *= 1.2
    depths[0] = DepthMap(bad, depths[0].mask)
    masks = filter_depths(depths, plane.views, min_views=1)
    assert not masks[0][12:18, 12:28].any()
    assert masks[0][25:, :].mean() > 0.8


def test_min_views_tightens_filter(plane):
    loose = filter_depths(plane.gt.depths, plane.views, min_views=1)[0].sum()
    strict = filter_depths(plane.gt.depths, plane.views, min_views=2)[0].sum()
    none = filter_depths(plane.gt.depths, plane.views, min_views=3)[0].sum()
    assert loose >= strict and none == 0


def test_voxel_dedup_keeps_first_point(plane):
    masks = [d.mask for d in plane.gt.depths]
    full = fuse_cloud(plane.gt.depths, masks, plane.views)
    coarse = fuse_cloud(plane.gt.depths, masks, plane.views, voxel=0.5)
    assert 0 < len(coarse) < len(full)
    keys = np.floor(coarse.points / 0.5).astype(np.int64)
    assert len(np.unique(keys, axis=0)) == len(coarse)
    np.testing.assert_array_equal(coarse.points[0], full.points[0])


def test_fuse_with_nothing_kept(plane):
    masks = [np.zeros_like(d.mask) for d in plane.gt.depths]
    assert len(fuse_cloud(plane.gt.depths, masks, plane.views)) == 0
