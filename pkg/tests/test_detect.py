import numpy as np
import pytest
from hypothesis import given, strategies as st

from cramfuse.detect import decode_boxes, decode_heading, encode_heading, nms_rotated
from cramfuse.geometry import Box3D
from cramfuse.metrics import rotated_bev_iou

from oracles import brute_force_nms


def test_decode_heading_bin_zero():
    logits = np.zeros(12)
    logits[0] = 1.0
    assert decode_heading(logits, 0.0) == pytest.approx(-np.pi + np.pi / 12, abs=1e-15)


def test_decode_heading_ties_lowest_bin():
    assert decode_heading(np.ones(12), 0.0) == pytest.approx(-np.pi + np.pi / 12)


def test_bin_center_round_trip():
    for b in range(12):
        theta = -np.pi + (b + 0.5) * np.pi / 6
        bins, r = encode_heading(theta)
        assert abs(decode_heading(np.eye(12)[bins], r) - theta) < 1e-12


def test_random_round_trip(rng):
    theta = rng.uniform(-np.pi, np.pi, 500)
    bins, r = encode_heading(theta)
    got = decode_heading(np.eye(12)[bins], r)
    # compare on the circle so -pi and pi agree
    err = np.abs(np.angle(np.exp(1j * (got - theta))))
    assert err.max() < 1e-9
    assert np.all((got >= -np.pi) & (got < np.pi))


def _scalar_decode(center, h, p):
    b = int(np.argmax(p[6:18]))
    theta = -np.pi + (b + 0.5) * np.pi / 6 + p[18] * np.pi / 12
    theta = (theta + np.pi) % (2 * np.pi) - np.pi
    return center + p[:3], np.exp(p[3:6]), theta, h


@given(st.integers(0, 2**31), st.floats(0.05, 0.95))
def test_decode_boxes_matches_scalar(seed, tau):
    rng = np.random.default_rng(seed)
    n = 30
    centers = rng.uniform(-20, 20, (n, 3))
    heat = rng.random(n)
    params = rng.normal(0, 1, (n, 19))
    boxes = decode_boxes(centers, heat, params, tau)
    assert len(boxes) == int(np.sum(heat > tau))
    for box, i in zip(boxes, np.flatnonzero(heat > tau)):
        c, s, th, h = _scalar_decode(centers[i], heat[i], params[i])
        np.testing.assert_allclose(box.center, c, atol=1e-12)
        np.testing.assert_allclose(box.size, s, rtol=1e-12)
        assert abs(np.angle(np.exp(1j * (box.heading - th)))) < 1e-12
        assert box.score == h


def test_decode_boxes_zero_outputs():
    centers = np.array([[1.0, 2.0, 0.5]])
    b = decode_boxes(centers, [0.9], np.zeros((1, 19)))
    np.testing.assert_array_equal(b[0].center, centers[0])
    np.testing.assert_array_equal(b[0].size, 1.0)
    assert decode_boxes(centers, [0.1], np.zeros((1, 19))) == []
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            decode_boxes(centers, [0.5], np.zeros((1, 19)), bad)


def test_nms_small_cases():
    a = Box3D([0, 0, 0], [4, 2, 1.5], 0.0, 0.9)
    assert nms_rotated([a]) == [a]
    b = Box3D([0, 0, 0], [4, 2, 1.5], 0.0, 0.8)
    assert nms_rotated([b, a]) == [a]
    assert nms_rotated([]) == []
    with pytest.raises(ValueError):
        nms_rotated([a], 0.0)


@given(st.integers(0, 2**31), st.sampled_from([0.01, 0.1, 0.3, 0.7]), st.integers(1, 10))
def test_nms_matches_brute_force(seed, thresh, max_out):
    rng = np.random.default_rng(seed)
    n = 25
    scores = np.round(rng.random(n), 1)  # coarse values force ties
    boxes = [
        Box3D([*rng.uniform(-5, 5, 2), 0], [*rng.uniform(1, 4, 2), 1.5], rng.uniform(-np.pi, np.pi), scores[i])
        for i in range(n)
    ]
    got = nms_rotated(boxes, thresh, max_out)
    want = brute_force_nms(boxes, rotated_bev_iou, thresh, max_out)
    assert [id(b) for b in got] == [id(b) for b in want]
    for i, x in enumerate(got):
        for y in got[i + 1:]:
            assert rotated_bev_iou(x, y) <= thresh
