import numpy as np
import pytest
from hypothesis import given, strategies as st

from cramfuse.fusion import fuse
from cramfuse.learner import TinyHead
from cramfuse.voxel import (
    _scan,
    _scan_dense,
    apply_detection_head,
    multi_scale_features,
    neighborhood_aggregate,
    neighborhood_centroid,
    voxelize_dynamic,
    window_offsets,
)

from oracles import dense_neighborhood

LO, HI = (-100.0, -100.0, -5.0), (100.0, 100.0, 5.0)


def cloud_of(points, feats):
    points = np.asarray(points, float)
    feats = np.asarray(feats, float)
    return fuse(points, feats, np.zeros((0, 3)), np.zeros((0, feats.shape[1])))


def random_cloud(rng, n=200, d=3, spread=2.0):
    return cloud_of(rng.uniform(-spread, spread, (n, 3)), rng.standard_normal((n, d)))


def test_single_point_cell():
    c = cloud_of([[-99.9, -99.9, -4.9]], [[1.0, 2.0]])
    g = voxelize_dynamic(c, LO, HI, 0.2)
    np.testing.assert_array_equal(g.indices, [[0, 0, 0]])
    np.testing.assert_array_equal(g.features[0], c.features[0])
    np.testing.assert_allclose(g.centers[0], [-99.9, -99.9, -4.9])


def test_two_points_mean_and_boundary():
    c = cloud_of([[0.01, 0.01, 0.01], [0.1, 0.1, 0.1], [100.0, 0, 0], [0, 0, 5.0]], [[1.0], [3.0], [7.0], [9.0]])
    g = voxelize_dynamic(c, LO, HI, 0.2)
    assert len(g) == 1
    np.testing.assert_allclose(g.features[0, 0], 2.0)
    assert g.counts.sum() == 2


@given(st.integers(0, 2**31), st.sampled_from(["pillar", "voxel3d"]))
def test_conservation_and_membership(seed, mode):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-120, 120, (300, 3))
    pts[:, 2] = rng.uniform(-7, 7, 300)
    c = cloud_of(pts, rng.standard_normal((300, 2)))
    g = voxelize_dynamic(c, LO, HI, 0.5, mode)
    inside = np.all((pts >= LO) & (pts < HI), axis=1)
    assert g.counts.sum() == inside.sum()
    assert np.all(g.counts >= 1)
    assert sorted(g.members.tolist()) == np.flatnonzero(inside).tolist()
    k = 2 if mode == "pillar" else 3
    for i in range(len(g)):
        mem = g.members[g.offsets[i]:g.offsets[i + 1]]
        idx = np.floor((pts[mem, :k] - np.array(LO[:k])) / 0.5).astype(int)
        assert np.all(idx == g.indices[i])
        np.testing.assert_allclose(g.features[i], c.features[mem].mean(axis=0), atol=1e-12)


def test_pillar_and_voxel_agree_on_xy(rng):
    c = random_cloud(rng, 500, spread=20)
    p = voxelize_dynamic(c, LO, HI, 0.2, "pillar")
    v = voxelize_dynamic(c, LO, HI, 0.2, "voxel3d")
    xy_p = {tuple(p.indices[i]) for i in range(len(p))}
    xy_v = {tuple(v.indices[i, :2]) for i in range(len(v))}
    assert xy_p == xy_v
    assert np.all(p.centers[:, 2] == 0.0)


def test_permutation_bit_identical(rng):
    c = random_cloud(rng, 400, spread=0.6)
    g0 = voxelize_dynamic(c, LO, HI, 0.2)
    for _ in range(10):
        perm = rng.permutation(len(c))
        g = voxelize_dynamic(cloud_of(c.points[perm], c.features[perm, :-2]), LO, HI, 0.2)
        np.testing.assert_array_equal(g.keys, g0.keys)
        np.testing.assert_array_equal(g.features, g0.features)


def test_cell_lookup(rng):
    g = voxelize_dynamic(random_cloud(rng), LO, HI, 0.2)
    feat, members, center = g.cell(g.indices[3])
    np.testing.assert_array_equal(feat, g.features[3])
    with pytest.raises(KeyError):
        g.cell((0, 0, 0))
    assert len(g.as_dict()) == len(g)


def test_aggregate_small_cases():
    c = cloud_of([[0.05, 0.05, 0.05], [10.0, 10.0, 0.0]], [[2.0], [4.0]])
    g = voxelize_dynamic(c, LO, HI, 0.2, "pillar")
    r0 = neighborhood_aggregate(g, 0)
    np.testing.assert_array_equal(r0.features[:, 3:6], g.features)
    np.testing.assert_array_equal(r0.features[:, -1], 1.0)
    r2 = neighborhood_aggregate(g, 2)
    np.testing.assert_array_equal(r2.features[:, 3:6], g.features)
    np.testing.assert_array_equal(r2.features[:, -1], 1 / 25)
    with pytest.raises(ValueError):
        neighborhood_aggregate(g, -1)


@given(st.integers(0, 2**31), st.integers(0, 3), st.sampled_from(["pillar", "voxel3d"]))
def test_aggregate_matches_dense_oracle(seed, radius, mode):
    rng = np.random.default_rng(seed)
    # confine to a 10-cell cube so neighborhoods overlap
    c = cloud_of(rng.uniform(0, 2.0, (60, 3)) - 5.0, rng.standard_normal((60, 2)))
    g = voxelize_dynamic(c, LO, HI, 0.2, mode)
    want = dense_neighborhood(g.indices, g.features, g.dims, radius)
    np.testing.assert_array_equal(neighborhood_aggregate(g, radius).features, want)


@pytest.mark.parametrize("radius", [4, 6, 12])
def test_dense_fast_path_agrees(radius, rng):
    c = cloud_of(rng.uniform(-6, 6, (400, 3)), rng.standard_normal((400, 4)))
    g = voxelize_dynamic(c, LO, HI, 0.2, "pillar")
    sparse = _scan(g, radius)
    dense = _scan_dense(g, radius)
    for a, b in zip(sparse[:3], dense[:3]):
        np.testing.assert_allclose(b, a, atol=1e-10)
    np.testing.assert_array_equal(sparse[1], dense[1])


def test_multi_scale_layout(rng):
    g = voxelize_dynamic(random_cloud(rng, 300, d=4, spread=3), LO, HI, 0.2, "pillar")
    f = g.features.shape[1]
    x = multi_scale_features(g, (1, 5), centroid=True)
    assert x.shape == (len(g), f + 2 * (f + 1 + 2))
    agg = neighborhood_aggregate(g, 1).features
    np.testing.assert_allclose(x[:, f:2 * f + 1], agg[:, f:], atol=1e-12)
    np.testing.assert_allclose(x[:, 2 * f + 1:2 * f + 3], neighborhood_centroid(g, 1), atol=1e-12)
    assert multi_scale_features(g, (2,)).shape == (len(g), 2 * f + 1)


def test_centroid_isolated_and_pull():
    c = cloud_of([[0.1, 0.1, 0], [0.3, 0.1, 0], [50, 50, 0]], [[1.0], [1.0], [1.0]])
    g = voxelize_dynamic(c, LO, HI, 0.2, "pillar")
    cen = neighborhood_centroid(g, 2)
    far = np.argmax(g.centers[:, 0])
    assert not cen[far].any()
    left = np.argmin(g.centers[:, 0])
    assert cen[left, 0] > 0 and cen[left, 1] == 0


def test_window_offsets_order():
    w = window_offsets(1, 2)
    assert len(w) == 9 and tuple(w[0]) == (-1, -1) and tuple(w[-1]) == (1, 1)


def test_detection_head_cases(rng):
    g = voxelize_dynamic(random_cloud(rng, 50, d=3), LO, HI, 0.2)
    f = g.features.shape[1]
    h, params = apply_detection_head(g, TinyHead.zeros(f, 1), TinyHead.zeros(f, 20))
    np.testing.assert_array_equal(h, 0.5)
    np.testing.assert_array_equal(np.exp(params[:, 3:6]), 1.0)
    hm = TinyHead.init(f, 1, 4, rng=1)
    hm.weights[1][:] = 1.0
    box = TinyHead([rng.standard_normal((f, 20))], [rng.standard_normal(20)])
    h, params = apply_detection_head(g, hm, box)
    for i in range(len(g)):
        z = np.tanh(g.features[i] @ hm.weights[0]) @ hm.weights[1]
        assert abs(h[i] - 1 / (1 + np.exp(-z[0]))) < 1e-12
        np.testing.assert_allclose(params[i], g.features[i] @ box.weights[0] + box.biases[0], atol=1e-12)
    empty = voxelize_dynamic(cloud_of(np.zeros((0, 3)), np.zeros((0, 3))), LO, HI, 0.2)
    h, params = apply_detection_head(empty, TinyHead.zeros(f, 1), TinyHead.zeros(f, 20))
    assert h.shape == (0,) and params.shape == (0, 20)
    with pytest.raises(ValueError):
        apply_detection_head(g, TinyHead.zeros(f + 1, 1), TinyHead.zeros(f, 20))
