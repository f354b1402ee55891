import numpy as np
import pytest

from pointdet.config import TrainConfig, format_config, parse_config_text
from pointdet.geometry import Box, iou
from pointdet.model import DetectionModel, ModelConfig
from pointdet.ops import sigmoid
from pointdet.scenes import GroundTruth, generate_scene
from pointdet.training import (
    assign_samples,
    compute_losses,
    focal_loss,
    focal_loss_from_logits,
    holdout_scenes,
    lr_at,
    total_loss,
    train_from_config,
)


def _forward_state(seed=0, image_seed=0, size=32, **cfg_kw):
    cfg = ModelConfig(channels=8, **cfg_kw)
    model = DetectionModel(cfg, seed=seed)
    img = np.random.default_rng(image_seed).uniform(size=(3, size, size))
    return model, model.forward(img)


# ---------------------------------------------------------------------------
# assignment


class _FakeCollection:
    """Minimal stand-in with hand-placed coarse boxes and grid centers."""

    def __init__(self, coarse, cx, cy):
        self.coarse = np.asarray(coarse, dtype=np.float64)
        self.grid_cx = np.asarray(cx, dtype=np.float64)
        self.grid_cy = np.asarray(cy, dtype=np.float64)


def test_assignment_threshold_strictness():
    # grid 0 matches the gt exactly (IoU 1 -> positive); grid 1 overlaps at
    # exactly IoU 0.6 (I=12, U=20, all-integer arithmetic) -> negative
    gt = GroundTruth(np.array([[1.0, 0.0, 5.0, 4.0]]), np.array([0]))
    box_exact_06 = np.array([0.0, 0.0, 4.0, 4.0])
    fake = _FakeCollection(
        np.stack([gt.boxes[0], box_exact_06]), np.array([2.0, 2.0]), np.array([2.0, 2.0])
    )
    assert iou(Box(*box_exact_06), Box(*gt.boxes[0])) == 0.6
    asn = assign_samples([fake], gt)
    assert 0 in asn.pos_flat
    assert 1 not in asn.pos_flat

    # IoU just above the threshold is positive: I=13, U=19 -> 13/19 > 0.6
    box = np.array([0.0, 0.0, 4.0, 4.0])
    gt_above = GroundTruth(np.array([[0.75, 0.0, 4.75, 4.0]]), np.array([0]))
    assert iou(Box(*box), Box(*gt_above.boxes[0])) == pytest.approx(13.0 / 19.0)
    asn2 = assign_samples([_FakeCollection(box[None], [2.0], [2.0])], gt_above)
    assert asn2.n_positives == 1


def test_assignment_empty_scene():
    model, state = _forward_state()
    gt = GroundTruth(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    asn = assign_samples(state.collections, gt)
    assert asn.n_positives == 0
    assert len(asn.center_flat) == 0
    total, comps, grads, _ = compute_losses(state, gt)
    assert comps["l_reg"] == 0.0 and comps["l_reg2"] == 0.0
    assert total == comps["l_cls"]


def test_assignment_center_match_is_closest_grid():
    model, state = _forward_state()
    gt = GroundTruth(np.array([[10.0, 10.0, 26.0, 24.0]]), np.array([1]))
    asn = assign_samples(state.collections, gt)
    # gt center (18, 17): nearest stride-4 grid center is (18, 18) = grid (4, 4)
    assert asn.center_level[0] == 0
    col = state.collections[0]
    flat = asn.center_flat[0]
    cx, cy = col.grid_cx[flat], col.grid_cy[flat]
    d_star = (cx - 18.0) ** 2 + (cy - 17.0) ** 2
    dall = (col.grid_cx - 18.0) ** 2 + (col.grid_cy - 17.0) ** 2
    assert d_star == dall.min()


def test_assignment_positive_soundness_recheck():
    model, state = _forward_state(image_seed=5)
    img, gt = generate_scene(17)
    state = model.forward(img)
    asn = assign_samples(state.collections, gt)
    for li, flat, gi in zip(asn.pos_level, asn.pos_flat, asn.pos_gt):
        col = state.collections[li]
        box = Box(*col.coarse[flat])
        ious = [iou(box, Box(*g)) for g in gt.boxes]
        assert max(ious) > 0.6
        assert int(np.argmax(ious)) == gi


# ---------------------------------------------------------------------------
# focal loss


def test_focal_perfect_prediction_zero():
    scores = np.array([[1.0, 0.0, 0.0]])
    assert focal_loss(scores, np.array([0])) == 0.0


def test_focal_hand_value():
    # positive class with p=0.9: 0.25 * 0.01 * (-ln 0.9)
    scores = np.array([[0.9]])
    expected = 0.25 * 0.01 * -np.log(0.9)
    assert focal_loss(scores, np.array([0])) == pytest.approx(expected, rel=1e-9)


def test_focal_gamma_zero_reduces_to_weighted_ce():
    rng = np.random.default_rng(0)
    scores = rng.uniform(0.05, 0.95, size=(6, 3))
    targets = rng.integers(-1, 3, size=6)
    alpha = 0.5
    got = focal_loss(scores, targets, alpha=alpha, gamma=0.0)
    ce = 0.0
    for g in range(6):
        for c in range(3):
            p = scores[g, c] if targets[g] == c else 1.0 - scores[g, c]
            ce += -alpha * np.log(p)
    ce /= max(1, int((targets >= 0).sum()))
    assert got == pytest.approx(ce, rel=1e-12)


def test_focal_logits_path_matches_probability_path():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 20)) * 3
    targets = rng.integers(-1, 3, size=20)
    loss_z, _ = focal_loss_from_logits(z, targets)
    loss_p = focal_loss(sigmoid(z).T, targets)
    assert loss_z == pytest.approx(loss_p, rel=1e-12)


def test_focal_normalized_by_positives():
    scores = np.full((4, 2), 0.5)
    targets = np.array([0, 1, -1, -1])
    a = focal_loss(scores, targets)
    b = focal_loss(scores, targets, n_positives=1)
    assert a == pytest.approx(b / 2)


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_zero_case():
    assert total_loss(0.0, 0.0, 0.0) == 0.0


def test_total_loss_balance_arithmetic():
    assert total_loss(1.0, 0.5, 0.2) == pytest.approx(2.1)


def test_reg2_averages_over_gt_count():
    model, _ = _forward_state()
    img, _ = generate_scene(3)
    state = model.forward(img)
    boxes = np.array([[4.0, 4.0, 20.0, 20.0], [30.0, 8.0, 50.0, 30.0]])
    gt = GroundTruth(boxes, np.array([0, 1]))
    _, comps, _, asn = compute_losses(state, gt)
    from pointdet.geometry import giou_loss_grad_array

    sel = np.stack([
        state.collections[li].coarse[flat]
        for li, flat in zip(asn.center_level, asn.center_flat)
    ])
    losses, _, _ = giou_loss_grad_array(sel, boxes)
    assert comps["l_reg2"] == pytest.approx(float(losses.mean()), rel=1e-12)


def test_loss_nonnegative_components():
    model, _ = _forward_state()
    for seed in range(5):
        img, gt = generate_scene(seed)
        state = model.forward(img)
        total, comps, _, _ = compute_losses(state, gt)
        assert comps["l_cls"] >= 0
        assert 0 <= comps["l_reg"] < 2
        assert 0 <= comps["l_reg2"] < 2
        assert total >= 0


# ---------------------------------------------------------------------------
# training loop


def test_lr_schedule_steps():
    assert lr_at(0.01, 0, 900) == 0.01
    assert lr_at(0.01, 599, 900) == 0.01
    assert lr_at(0.01, 600, 900) == pytest.approx(0.001)
    assert lr_at(0.01, 799, 900) == pytest.approx(0.001)
    assert lr_at(0.01, 800, 900) == pytest.approx(0.0001)


def test_zero_iteration_training_keeps_init(tmp_path):
    cfg = TrainConfig(iters=0, out_dir=str(tmp_path))
    model, history = train_from_config(cfg)
    ref = DetectionModel(ModelConfig(), seed=0)
    assert history == []
    for p, q in zip(model.parameters(), ref.parameters()):
        assert np.array_equal(p.value, q.value)


def test_short_training_is_bit_reproducible():
    cfg = TrainConfig(iters=60, image_size=32, max_objects=2)

    def run():
        model, history = train_from_config(cfg)
        return model, history

    model_a, hist_a = run()
    model_b, hist_b = run()
    for p, q in zip(model_a.parameters(), model_b.parameters()):
        assert p.value.tobytes() == q.value.tobytes(), f"non-deterministic {p.name}"
    assert hist_a == hist_b


def test_short_training_decreases_loss():
    # loss first rises as positives appear, then falls; compare 50-iter means
    cfg = TrainConfig(iters=300, image_size=32, max_objects=2)
    _, hist = train_from_config(cfg)
    early_total = np.mean([h["total"] for h in hist[:50]])
    late_total = np.mean([h["total"] for h in hist[-50:]])
    early_cls = np.mean([h["l_cls"] for h in hist[:50]])
    late_cls = np.mean([h["l_cls"] for h in hist[-50:]])
    assert late_total < early_total
    assert late_cls < early_cls


def test_divergence_restores_last_good_params():
    from pointdet.training import TrainingDiverged

    cfg = TrainConfig(iters=30, image_size=32, max_objects=2, lr=1e12)
    with pytest.raises(TrainingDiverged) as exc:
        with np.errstate(all="ignore"):
            train_from_config(cfg)
    model = exc.value.model
    assert model is not None
    for p in model.parameters():
        assert np.all(np.isfinite(p.value)), f"non-finite restored param {p.name}"


def test_holdout_scene_stream_disjoint_from_training():
    cfg = TrainConfig()
    train_img, _ = generate_scene(
        np.random.SeedSequence([cfg.seed, 0, 0]), 64, 64, 3, 3
    )
    (hold_img, _), = holdout_scenes(cfg, 1)
    assert not np.array_equal(train_img, hold_img)


# ---------------------------------------------------------------------------
# config file format


def test_config_parse_roundtrip():
    cfg = TrainConfig(seed=5, iters=123, lr=0.02, neighbor_set=(-1, 0), out_dir="x/y")
    back = parse_config_text(format_config(cfg))
    assert back == cfg


def test_config_defaults_and_overrides():
    cfg = parse_config_text("iters = 10\nlambda1 = 1.5\nneighbor_set = 0\n")
    assert cfg.iters == 10
    assert cfg.lambda1 == 1.5
    assert cfg.neighbor_set == (0,)
    assert cfg.seed == 0  # default preserved


def test_config_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown config key 'bogus'"):
        parse_config_text("bogus = 3\n")


def test_config_bad_value_rejected():
    with pytest.raises(ValueError, match="expects"):
        parse_config_text("iters = banana\n")
    with pytest.raises(ValueError, match="key = value"):
        parse_config_text("justtext\n")


def test_config_comments_and_blanks():
    cfg = parse_config_text("# comment\n\nseed = 9\n")
    assert cfg.seed == 9
