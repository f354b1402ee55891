import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointdet.geometry import (
    Box,
    clamp_box,
    fold_boxes,
    giou,
    giou_loss,
    giou_loss_grad,
    giou_loss_grad_array,
    iou,
    iou_matrix,
)

UNIT = Box(0, 0, 1, 1)


def boxes(max_coord=10.0):
    coord = st.floats(0, max_coord, allow_nan=False)

    def build(a, b, c, d):
        return Box(min(a, c), min(b, d), max(a, c), max(b, d))

    return st.builds(build, coord, coord, coord, coord)


def test_box_validation():
    with pytest.raises(ValueError, match="r >= l"):
        Box(1, 0, 0, 1)
    with pytest.raises(ValueError, match="finite"):
        Box(0, 0, np.inf, 1)
    assert Box(1, 2, 1, 2).area == 0.0  # degenerate allowed


def test_iou_identity_and_disjoint():
    assert iou(UNIT, UNIT) == 1.0
    assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0


def test_iou_hand_value():
    assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1.0 / 7.0)


def test_iou_zero_union_defined_as_zero():
    degenerate = Box(1, 1, 1, 1)
    assert iou(degenerate, degenerate) == 0.0


def test_giou_identity():
    assert giou(UNIT, UNIT) == 1.0
    assert giou_loss(UNIT, UNIT) == 0.0


def test_giou_hand_values():
    assert giou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1.0 / 7.0 - 2.0 / 9.0)
    assert giou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == pytest.approx(-7.0 / 9.0)


def test_giou_both_degenerate_defined_zero():
    a = Box(1, 1, 1, 1)
    b = Box(4, 2, 4, 2)
    assert giou(a, b) == 0.0
    loss, ga, gb = giou_loss_grad(a, b)
    assert loss == 1.0
    assert np.all(ga == 0) and np.all(gb == 0)


@settings(max_examples=200, deadline=None)
@given(a=boxes(), b=boxes())
def test_symmetry_and_giou_bounds(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    g = giou(a, b)
    assert g == pytest.approx(giou(b, a), abs=1e-12)
    assert -1.0 <= g <= 1.0 + 1e-12
    assert g <= iou(a, b) + 1e-12
    assert 0.0 <= giou_loss(a, b) < 2.0 + 1e-12


def test_giou_equals_iou_under_containment():
    outer = Box(0, 0, 10, 10)
    inner = Box(2, 3, 5, 6)
    assert giou(outer, inner) == pytest.approx(iou(outer, inner))


def test_giou_gradients_match_fd():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(30):
        raw = rng.uniform(0, 10, size=8)
        pa = np.array([min(raw[0], raw[2]), min(raw[1], raw[3]),
                       max(raw[0], raw[2]), max(raw[1], raw[3])])
        pb = np.array([min(raw[4], raw[6]), min(raw[5], raw[7]),
                       max(raw[4], raw[6]), max(raw[5], raw[7])])
        # keep away from tie/kink configurations for FD
        diffs = [pa[0] - pb[0], pa[1] - pb[1], pa[2] - pb[2], pa[3] - pb[3],
                 min(pa[2], pb[2]) - max(pa[0], pb[0]),
                 min(pa[3], pb[3]) - max(pa[1], pb[1]),
                 pa[2] - pa[0], pa[3] - pa[1], pb[2] - pb[0], pb[3] - pb[1]]
        if min(abs(d) for d in diffs) < 1e-2:
            continue
        _, ga, gb = giou_loss_grad_array(pa[None], pb[None])
        eps = 1e-6
        for arr, grad in ((pa, ga[0]), (pb, gb[0])):
            for i in range(4):
                old = arr[i]
                arr[i] = old + eps
                hi = float(giou_loss_grad_array(pa[None], pb[None])[0][0])
                arr[i] = old - eps
                lo = float(giou_loss_grad_array(pa[None], pb[None])[0][0])
                arr[i] = old
                num = (hi - lo) / (2 * eps)
                worst = max(worst, abs(num - grad[i]) / max(1.0, abs(num), abs(grad[i])))
    assert worst < 1e-6


def test_fold_boxes_routes_inverted_coordinates():
    inverted = np.array([[5.0, 1.0, 2.0, 4.0]])
    folded, swap_x, swap_y = fold_boxes(inverted)
    np.testing.assert_array_equal(folded, [[2.0, 1.0, 5.0, 4.0]])
    assert swap_x[0] and not swap_y[0]
    # loss of the folded box equals loss computed on the pre-sorted box
    gt = np.array([[2.0, 1.0, 5.0, 4.0]])
    loss_inv, _, _ = giou_loss_grad_array(inverted, gt)
    loss_ok, _, _ = giou_loss_grad_array(folded, gt)
    assert loss_inv[0] == loss_ok[0] == pytest.approx(0.0)


def test_clamp_box():
    assert clamp_box(Box(-5, -5, 10, 10), 8, 8) == Box(0, 0, 8, 8)
    inside = Box(1, 2, 3, 4)
    assert clamp_box(inside, 8, 8) == inside
    degenerate = clamp_box(Box(9, 9, 12, 12), 8, 8)
    assert degenerate == Box(8, 8, 8, 8)
    assert degenerate.area == 0.0
    with pytest.raises(ValueError, match="positive"):
        clamp_box(inside, 0, 8)


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(11)
    a = np.sort(rng.uniform(0, 10, size=(5, 2, 2)), axis=2).reshape(5, 4)[:, [0, 2, 1, 3]]
    b = np.sort(rng.uniform(0, 10, size=(4, 2, 2)), axis=2).reshape(4, 4)[:, [0, 2, 1, 3]]
    mat = iou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert mat[i, j] == pytest.approx(
                iou(Box.from_array(a[i]), Box.from_array(b[j])), abs=1e-12
            )
