import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointdet import ops


def test_conv_identity_1x1():
    x = np.array([[[5.0]]])
    w = np.array([[[[1.0]]]])
    y, _ = ops.conv2d(x, w, np.zeros(1), stride=1, padding=0)
    assert y.shape == (1, 1, 1)
    assert y[0, 0, 0] == 5.0


def test_conv_all_ones_center():
    x = np.ones((1, 3, 3))
    w = np.ones((1, 1, 3, 3))
    y, _ = ops.conv2d(x, w, np.zeros(1), stride=1, padding=1)
    assert y.shape == (1, 3, 3)
    assert y[0, 1, 1] == 9.0
    assert y[0, 0, 0] == 4.0  # corner sees a 2x2 patch


def test_conv_output_shape_stride2():
    x = np.zeros((2, 8, 8))
    w = np.zeros((5, 2, 3, 3))
    y, _ = ops.conv2d(x, w, np.zeros(5), stride=2, padding=1)
    assert y.shape == (5, 4, 4)


def test_conv_weight_gradient_matches_fd():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(3, 4, 4))

    def loss():
        y, _ = ops.conv2d(x, w, b, stride=1, padding=1)
        return float((y * r).sum())

    _, cache = ops.conv2d(x, w, b, stride=1, padding=1)
    _, gw, _ = ops.conv2d_backward(cache, r)
    eps = 1e-6
    worst = 0.0
    for idx in np.ndindex(w.shape):
        old = w[idx]
        w[idx] = old + eps
        hi = loss()
        w[idx] = old - eps
        lo = loss()
        w[idx] = old
        num = (hi - lo) / (2 * eps)
        worst = max(worst, abs(num - gw[idx]) / max(1.0, abs(num), abs(gw[idx])))
    assert worst < 1e-6


def test_conv_shape_errors_name_dimension():
    with pytest.raises(ValueError, match="channel"):
        ops.conv2d(np.zeros((3, 4, 4)), np.zeros((2, 4, 3, 3)), np.zeros(2))
    with pytest.raises(ValueError, match="odd"):
        ops.conv2d(np.zeros((3, 4, 4)), np.zeros((2, 3, 2, 2)), np.zeros(2))
    with pytest.raises(ValueError, match="stride"):
        ops.conv2d(np.zeros((3, 4, 4)), np.zeros((2, 3, 3, 3)), np.zeros(2), stride=3)
    with pytest.raises(ValueError, match="bias"):
        ops.conv2d(np.zeros((3, 4, 4)), np.zeros((2, 3, 3, 3)), np.zeros(5))


def test_conv_deterministic():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y1, _ = ops.conv2d(x, w, b, padding=1)
    y2, _ = ops.conv2d(x, w, b, padding=1)
    assert np.array_equal(y1, y2)


# ---------------------------------------------------------------------------
# bilinear sampling


def test_bilinear_integer_gridpoint_exact():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(4, 5))
    assert ops.bilinear_sample(m, 1.0, 2.0) == m[2, 1]


def test_bilinear_midpoint_average():
    m = np.zeros((2, 2))
    m[0, 0] = 1.0
    m[0, 1] = 3.0
    assert ops.bilinear_sample(m, 0.5, 0.0) == pytest.approx(2.0)


def test_bilinear_clamps_to_border():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(3, 4))
    assert ops.bilinear_sample(m, -1.0, 0.0) == m[0, 0]
    assert ops.bilinear_sample(m, 99.0, 99.0) == m[2, 3]


def test_bilinear_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        ops.bilinear_sample(np.zeros((2, 2)), np.nan, 0.0)
    with pytest.raises(ValueError, match="non-finite"):
        ops.bilinear_sample(np.zeros((2, 2)), 0.0, np.inf)


@settings(max_examples=60, deadline=None)
@given(
    x=st.floats(-2.0, 6.0, allow_nan=False),
    y=st.floats(-2.0, 5.0, allow_nan=False),
    seed=st.integers(0, 100),
)
def test_bilinear_output_within_support_hull(x, y, seed):
    m = np.random.default_rng(seed).normal(size=(4, 5))
    v = ops.bilinear_sample(m, x, y)
    # support cell under the clamp convention
    xc = min(max(x, 0.0), 4.0)
    yc = min(max(y, 0.0), 3.0)
    x0 = min(int(np.floor(xc)), 3)
    y0 = min(int(np.floor(yc)), 2)
    corners = [m[y0, x0], m[y0, x0 + 1], m[y0 + 1, x0], m[y0 + 1, x0 + 1]]
    assert min(corners) - 1e-12 <= v <= max(corners) + 1e-12


def test_bilinear_single_pixel_map():
    m = np.array([[7.0]])
    assert ops.bilinear_sample(m, 0.3, -2.0) == 7.0
    value, gmap, dx, dy = ops.bilinear_sample_grad(m, 0.3, -2.0)
    assert value == 7.0 and dx == 0.0 and dy == 0.0
    assert gmap[0, 0] == 1.0


def test_bilinear_gradient_wrt_map_and_coords():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(5, 6))
    x, y = 2.3, 1.7
    value, gmap, dx, dy = ops.bilinear_sample_grad(m, x, y)
    eps = 1e-6
    ndx = (ops.bilinear_sample(m, x + eps, y) - ops.bilinear_sample(m, x - eps, y)) / (2 * eps)
    ndy = (ops.bilinear_sample(m, x, y + eps) - ops.bilinear_sample(m, x, y - eps)) / (2 * eps)
    assert dx == pytest.approx(ndx, rel=1e-6, abs=1e-9)
    assert dy == pytest.approx(ndy, rel=1e-6, abs=1e-9)
    for idx in np.ndindex(m.shape):
        old = m[idx]
        m[idx] = old + eps
        hi = ops.bilinear_sample(m, x, y)
        m[idx] = old - eps
        lo = ops.bilinear_sample(m, x, y)
        m[idx] = old
        assert gmap[idx] == pytest.approx((hi - lo) / (2 * eps), abs=1e-9)


def test_bilinear_integer_coordinate_uses_right_cell():
    # value slope differs left/right of x=1; right-limit convention applies
    m = np.array([[0.0, 1.0, 5.0]])
    _, _, dx, _ = ops.bilinear_sample_grad(m, 1.0, 0.0)
    assert dx == pytest.approx(4.0)  # slope of the right cell


# ---------------------------------------------------------------------------
# softmax / sigmoid


def test_softmax_symmetry():
    np.testing.assert_allclose(ops.softmax(np.array([0.0, 0.0])), [0.5, 0.5])


def test_softmax_hand_value():
    s = ops.softmax(np.array([np.log(2.0), 0.0]))
    np.testing.assert_allclose(s, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)


def test_softmax_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        ops.softmax(np.array([]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=8))
def test_softmax_simplex_and_shift_invariance(vals):
    v = np.array(vals)
    s = ops.softmax(v)
    assert abs(s.sum() - 1.0) < 1e-12
    assert np.all(s > 0)
    s_shift = ops.softmax(v + 3.7)
    assert np.max(np.abs(s - s_shift)) < 1e-12
    gap = np.sort(v)[-2:] if len(v) > 1 else None
    if gap is not None and gap[1] - gap[0] > 1e-6:  # argmax resolvable in float
        assert s.argmax() == v.argmax()


def test_sigmoid_extremes_stable():
    assert ops.sigmoid(np.array([800.0]))[0] == 1.0
    assert ops.sigmoid(np.array([-800.0]))[0] == 0.0
    assert ops.sigmoid(np.array([0.0]))[0] == 0.5
