import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cramfuse.config import ConfigError, PipelineConfig
from cramfuse.features import (
    CAMERA_CODE,
    RADAR_CODE,
    FeatureMap,
    append_modality_code,
    extract_features,
    predict_depth,
    score_foreground,
    select_foreground,
    smoothing_sizes,
)
from cramfuse.learner import TinyHead

images = arrays(np.float64, (12, 15), elements=st.floats(0, 1))


def test_default_hyperparameters():
    cfg = PipelineConfig()
    assert cfg.tau == 0.15 and cfg.d == 16
    assert (cfg.lambda_seg, cfg.lambda_depth, cfg.lambda_hm) == (400.0, 20.0, 4.0)
    assert cfg.s == 1 and cfg.epsilon == 0.10 and cfg.p_drop == 0.2
    assert cfg.sigma_h == 1.0 and cfg.epsilon_h == 0.2 and cfg.num_heading_bins == 12
    assert cfg.region_min == (-100.0, -100.0, -5.0) and cfg.region_max == (100.0, 100.0, 5.0)
    assert cfg.voxel_size == 0.2
    for bad in ({"tau": 0.0}, {"tau": 1.0}, {"d": 3}, {"p_drop": 1.0}, {"dropout_location": "x"}):
        with pytest.raises(ConfigError):
            PipelineConfig(**bad)
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


@given(images, st.integers(4, 24))
def test_features_bounded_and_deterministic(img, d):
    fm = extract_features(img, d)
    assert fm.grid.shape == (12, 15, d)
    assert np.all(np.isfinite(fm.grid)) and np.abs(fm.grid).max() <= 1.0
    np.testing.assert_array_equal(fm.grid, extract_features(img, d).grid)


def test_constant_image_has_zero_gradients():
    fm = extract_features(np.full((8, 9), 0.37), 16)
    assert not fm.grid[..., 1].any() and not fm.grid[..., 2].any()
    np.testing.assert_allclose(fm.grid[..., 4], -1.0)  # zero variance maps to -1


def test_step_edge_gradient_peak():
    img = np.zeros((10, 20))
    img[:, 11:] = 1.0
    g = extract_features(img, 8).grid[..., 1]
    # central difference oracle: (I[c+1] - I[c-1]) / 2 peaks at columns 10 and 11
    oracle = np.zeros(20)
    oracle[10] = oracle[11] = 0.5
    np.testing.assert_allclose(g[5], 2.0 * oracle)
    assert set(np.flatnonzero(np.abs(g[5]) == np.abs(g[5]).max())) == {10, 11}


def test_gradient_translation_equivariance(rng):
    img = rng.random((20, 30))
    shifted = np.roll(img, 3, axis=1)
    g0 = extract_features(img, 8).grid[..., 1]
    g1 = extract_features(shifted, 8).grid[..., 1]
    np.testing.assert_array_equal(g1[:, 5:-2], g0[:, 2:-5])


def test_feature_dim_guard():
    with pytest.raises(ConfigError):
        extract_features(np.zeros((4, 4)), 3)
    assert smoothing_sizes(3) == [5, 7, 9]


def test_score_foreground_cases(rng):
    fm = FeatureMap(rng.uniform(-1, 1, (6, 7, 5)))
    np.testing.assert_array_equal(score_foreground(fm, TinyHead.zeros(5, 1)), 0.5)
    big = TinyHead([np.zeros((5, 1))], [np.array([20.0])])
    s = score_foreground(fm, big)
    assert np.all(s > 1 - 1e-8) and np.all(s <= 1 - 1e-12)
    head = TinyHead.init(5, 1, hidden=4, rng=1)
    head.weights[1][:] = rng.standard_normal((4, 1))
    got = score_foreground(fm, head)
    for r in range(6):
        for c in range(7):
            z = np.tanh(fm.grid[r, c] @ head.weights[0] + head.biases[0]) @ head.weights[1] + head.biases[1]
            assert abs(got[r, c] - 1 / (1 + np.exp(-z[0]))) < 1e-12
    with pytest.raises(ValueError):
        score_foreground(fm, TinyHead.zeros(4, 1))


def test_predict_depth_cases(rng):
    fm = FeatureMap(rng.uniform(-1, 1, (5, 4, 6)))
    np.testing.assert_allclose(predict_depth(fm, TinyHead.zeros(6, 1)), np.log(2) + 0.5, rtol=0, atol=1e-15)
    head = TinyHead([rng.standard_normal((6, 1))], [np.zeros(1)])
    d0 = predict_depth(fm, head)
    head.biases[0][0] = 0.3
    assert np.all(predict_depth(fm, head) > d0)
    z = fm.flat() @ head.weights[0][:, 0] + 0.3
    np.testing.assert_allclose(predict_depth(fm, head).ravel(), np.log1p(np.exp(z)) + 0.5, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        predict_depth(fm, TinyHead.zeros(6, 2))


@given(arrays(np.float64, (7, 8), elements=st.floats(0.001, 0.999)), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_select_foreground(scores, t1, t2):
    got = select_foreground(scores, t1)
    brute = [(r, c) for r in range(7) for c in range(8) if scores[r, c] > t1]
    assert [tuple(p) for p in got] == brute
    lo, hi = sorted((t1, t2))
    assert {tuple(p) for p in select_foreground(scores, hi)} <= {tuple(p) for p in select_foreground(scores, lo)}


def test_select_foreground_default_tau_empty():
    assert len(select_foreground(np.full((3, 3), 0.1), PipelineConfig().tau)) == 0


def test_modality_code():
    v = np.array([0.1, -0.2, 0.3])
    np.testing.assert_array_equal(append_modality_code(v, "camera"), [0.1, -0.2, 0.3, 1, 0])
    np.testing.assert_array_equal(append_modality_code(v, "radar"), [0.1, -0.2, 0.3, 0, 1])
    assert CAMERA_CODE @ RADAR_CODE == 0
    batch = append_modality_code(np.ones((4, 3)), "radar")
    assert batch.shape == (4, 5) and np.all(batch[:, -1] == 1)
    with pytest.raises(ValueError):
        append_modality_code(v, "lidar")
