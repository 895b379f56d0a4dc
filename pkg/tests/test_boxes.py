import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import jitter_near, random_boxes
from diffref3d.boxes import (
    ConfigError,
    InvalidBoxError,
    classification_target,
    corners,
    decode,
    denormalize,
    encode,
    iou_3d,
    iou_matrix,
    make_box,
    normalize,
    wrap_angle,
)

UNIT = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0])


def mc_iou(a, b, n, rng):
    """Monte-Carlo IoU: sample inside ``a`` and count hits in ``b``."""
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * a[3:6]
    ca, sa = math.cos(a[6]), math.sin(a[6])
    world = np.column_stack(
        [a[0] + ca * local[:, 0] - sa * local[:, 1], a[1] + sa * local[:, 0] + ca * local[:, 1], a[2] + local[:, 2]]
    )
    rel = world - b[:3]
    cb, sb = math.cos(b[6]), math.sin(b[6])
    u = cb * rel[:, 0] + sb * rel[:, 1]
    v = -sb * rel[:, 0] + cb * rel[:, 1]
    inside = (np.abs(u) <= b[3] / 2) & (np.abs(v) <= b[4] / 2) & (np.abs(rel[:, 2]) <= b[5] / 2)
    va, vb = np.prod(a[3:6]), np.prod(b[3:6])
    inter = inside.mean() * va
    return inter / (va + vb - inter)


def test_encode_center_offset():
    res = encode(UNIT, [0.5, 0, 0, 1, 1, 1, 0])
    np.testing.assert_allclose(res, [0.5 / math.sqrt(2), 0, 0, 0, 0, 0, 0], atol=1e-12)
    assert res[0] == pytest.approx(0.353553, abs=1e-6)


def test_encode_log_extent():
    res = encode(UNIT, [0, 0, 0, math.e, 1, 1, 0])
    np.testing.assert_allclose(res[3:6], [1.0, 0.0, 0.0], atol=1e-12)


def test_decode_center():
    box = decode(UNIT, [1 / math.sqrt(2), 0, 0, 0, 0, 0, 0])
    assert box[0] == pytest.approx(1.0, abs=1e-12)


def test_normalize_hand_values():
    prop = np.array([1.0, 2.0, 3.0, 3.0, 4.0, 2.0, 0.3])
    expected = np.array([1 / 5, 1 / 5, 1 / 2, 1 / 5, 1 / 5, 1 / 2, 3 / 4])
    np.testing.assert_allclose(normalize(np.ones(7), prop), expected, rtol=1e-12)
    np.testing.assert_allclose(denormalize(expected, prop), np.ones(7), rtol=1e-12)


def test_encode_wraps_angle():
    res = encode([0, 0, 0, 1, 1, 1, 3.0], [0, 0, 0, 1, 1, 1, -3.0])
    assert -math.pi <= res[6] < math.pi
    assert res[6] == pytest.approx(2 * math.pi - 6.0)


def test_rejects_bad_boxes():
    with pytest.raises(InvalidBoxError):
        encode([0, 0, 0, 0, 1, 1, 0], UNIT)
    with pytest.raises(InvalidBoxError):
        iou_3d(UNIT, [0, 0, 0, 1, -1, 1, 0])
    with pytest.raises(InvalidBoxError):
        make_box(0, 0, np.nan, 1, 1, 1, 0)
    with pytest.raises(InvalidBoxError):
        corners(np.zeros(6))


def test_roundtrips_batch(rng):
    p = random_boxes(rng, 10_000)
    t = jitter_near(rng, p, 0.5)
    t[:, 6] = wrap_angle(t[:, 6])
    back = decode(p, encode(p, t))
    err = np.abs(back - t)
    err[:, 6] = np.abs(wrap_angle(back[:, 6] - t[:, 6]))
    assert err.max() < 1e-9
    x = rng.normal(size=(10_000, 7))
    assert np.abs(denormalize(normalize(x, p), p) - x).max() < 1e-9


def test_corners_quarter_turn():
    c = corners([0, 0, 0, 2, 1, 1, math.pi / 2])
    base = c[:4, :2]
    # at 90 degrees the w extent runs along y and h along x
    np.testing.assert_allclose(np.abs(base[:, 0]), 0.5, atol=1e-12)
    np.testing.assert_allclose(np.abs(base[:, 1]), 1.0, atol=1e-12)
    c0 = corners([0, 0, 0, 2, 1, 1, 0])
    np.testing.assert_allclose(np.abs(c0[:4, 0]), 1.0, atol=1e-12)


def test_corners_shape_and_order():
    c = corners(np.tile(UNIT, (4, 5, 1)))
    assert c.shape == (4, 5, 8, 3)
    np.testing.assert_allclose(c[0, 0, 0], [-0.5, -0.5, -0.5])
    np.testing.assert_allclose(c[0, 0, 6], [0.5, 0.5, 0.5])


def test_iou_offset_cubes():
    assert iou_3d(UNIT, [0.5, 0, 0, 1, 1, 1, 0]) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_offset_cubes_monte_carlo():
    rng = np.random.default_rng(0)
    b = np.array([0.5, 0, 0, 1, 1, 1, 0])
    assert abs(mc_iou(UNIT, b, 200_000, rng) - 1 / 3) < 0.01


def test_iou_disjoint_and_identical(rng):
    boxes = random_boxes(rng, 50)
    np.testing.assert_allclose(iou_3d(boxes, boxes), 1.0, atol=1e-9)
    far = boxes.copy()
    far[:, 0] += 100
    assert np.all(iou_3d(boxes, far) == 0)
    stacked = boxes.copy()
    stacked[:, 2] += boxes[:, 5]
    assert np.all(iou_3d(boxes, stacked) < 1e-12)


def test_iou_vs_monte_carlo_oracle():
    rng = np.random.default_rng(7)
    a = random_boxes(rng, 100)
    b = jitter_near(rng, a, 0.25)
    ious = iou_3d(a, b)
    oracle = np.array([mc_iou(a[i], b[i], 200_000, rng) for i in range(100)])
    assert np.abs(ious - oracle).max() < 0.01


def test_iou_matrix_shape(rng):
    a, b = random_boxes(rng, 3), random_boxes(rng, 4)
    m = iou_matrix(a, b)
    assert m.shape == (3, 4)
    np.testing.assert_allclose(m[1, 2], iou_3d(a[1], b[2]))
    assert iou_matrix(a, np.zeros((0, 7))).shape == (3, 0)


def test_classification_target():
    assert classification_target(0.5, 0.25, 0.75) == pytest.approx(0.5)
    np.testing.assert_allclose(classification_target([0.1, 0.25, 0.75, 0.9], 0.25, 0.75), [0, 0, 1, 1])
    with pytest.raises(ConfigError):
        classification_target(0.5, 0.8, 0.3)


box_st = st.tuples(
    st.floats(-50, 50),
    st.floats(-50, 50),
    st.floats(-5, 5),
    st.floats(0.05, 10),
    st.floats(0.05, 10),
    st.floats(0.05, 10),
    st.floats(-math.pi, math.pi, exclude_max=True),
).map(np.array)


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_roundtrip_property(p, t):
    back = decode(p, encode(p, t))
    np.testing.assert_allclose(back[:6], t[:6], rtol=1e-9, atol=1e-9)
    assert abs(wrap_angle(back[6] - t[6])) < 1e-9


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_iou_bounds_and_symmetry(a, b):
    ab = float(iou_3d(a, b))
    ba = float(iou_3d(b, a))
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(ba, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(box_st)
def test_iou_yaw_half_turn_invariant(a):
    flipped = a.copy()
    flipped[6] = wrap_angle(a[6] + math.pi)
    assert float(iou_3d(a, flipped)) == pytest.approx(1.0, abs=1e-9)
