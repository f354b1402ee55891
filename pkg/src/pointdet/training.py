"""Sample assignment, losses, and the optimization loop.

The total loss is ``L_cls + lambda1 * L_reg + lambda2 * L_reg2`` where L_cls
is a focal loss on the aggregated class scores of every grid, L_reg is the
mean GIoU loss of the collected boxes over positive grids, and L_reg2 is the
mean GIoU loss of the coarse boxes matched to each ground truth's
center-closest grid. A grid is positive iff its coarse box overlaps its
best-IoU ground truth strictly above 0.6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .geometry import giou_loss_grad_array, iou_matrix
from .model import DetectionModel, ModelConfig, ModelState
from .ops import sigmoid, softplus
from .optim import SGD, NonFiniteGradientError
from .scenes import GroundTruth, generate_scene, scene_seed

__all__ = [
    "Assignment",
    "assign_samples",
    "focal_loss",
    "focal_loss_from_logits",
    "total_loss",
    "compute_losses",
    "TrainingDiverged",
    "run_training",
    "train_from_config",
    "model_config_from",
    "holdout_scenes",
    "lr_at",
    "IOU_POSITIVE_THRESHOLD",
]

IOU_POSITIVE_THRESHOLD = 0.6
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class Assignment:
    """Positive grids and per-gt center matches, flat row-major grid indices."""

    pos_level: np.ndarray   # [P]
    pos_flat: np.ndarray    # [P]
    pos_gt: np.ndarray      # [P]
    center_level: np.ndarray  # [M]
    center_flat: np.ndarray   # [M]

    @property
    def n_positives(self) -> int:
        return len(self.pos_flat)


def assign_samples(collections, gt: GroundTruth, rule: str = "coarse-iou") -> Assignment:
    """Match grids to ground truths.

    Under the default ``coarse-iou`` rule a grid is positive iff the IoU
    between its coarse box and its best-IoU ground truth exceeds 0.6
    strictly. The ``inside-box`` rule (the dense per-pixel recipe used to
    train the accuracy-map analysis baseline) makes every grid whose center
    lies inside a gt box positive, matched to the smallest containing box.
    Each ground truth additionally gets one center match: the grid (over all
    levels) whose center is closest to the gt center; distance ties prefer
    the coarser level, then row-major order within a level.
    """
    if rule not in ("coarse-iou", "inside-box"):
        raise ValueError(f"unknown assignment rule {rule!r}")
    m = len(gt)
    pos_level, pos_flat, pos_gt = [], [], []
    center_level = np.zeros(m, dtype=np.int64)
    center_flat = np.zeros(m, dtype=np.int64)
    if m == 0:
        return Assignment(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )
    areas = (gt.boxes[:, 2] - gt.boxes[:, 0]) * (gt.boxes[:, 3] - gt.boxes[:, 1])
    for li, col in enumerate(collections):
        if rule == "coarse-iou":
            ious = iou_matrix(col.coarse, gt.boxes)
            best_gt = ious.argmax(axis=1)
            best_iou = ious[np.arange(len(best_gt)), best_gt]
            mask = best_iou > IOU_POSITIVE_THRESHOLD
            idx = np.nonzero(mask)[0]
            matched = best_gt[idx]
        else:
            inside = (
                (col.grid_cx[:, None] > gt.boxes[None, :, 0])
                & (col.grid_cx[:, None] < gt.boxes[None, :, 2])
                & (col.grid_cy[:, None] > gt.boxes[None, :, 1])
                & (col.grid_cy[:, None] < gt.boxes[None, :, 3])
            )
            cost = np.where(inside, areas[None, :], np.inf)
            matched_all = cost.argmin(axis=1)
            idx = np.nonzero(inside.any(axis=1))[0]
            matched = matched_all[idx]
        pos_level.append(np.full(len(idx), li, dtype=np.int64))
        pos_flat.append(idx.astype(np.int64))
        pos_gt.append(matched.astype(np.int64))

    gcx = 0.5 * (gt.boxes[:, 0] + gt.boxes[:, 2])
    gcy = 0.5 * (gt.boxes[:, 1] + gt.boxes[:, 3])
    best_d = np.full(m, np.inf)
    for li in range(len(collections) - 1, -1, -1):  # coarser levels win ties
        col = collections[li]
        d = (col.grid_cx[:, None] - gcx[None, :]) ** 2 + (
            col.grid_cy[:, None] - gcy[None, :]
        ) ** 2
        flat = d.argmin(axis=0)
        dval = d[flat, np.arange(m)]
        better = dval < best_d
        best_d[better] = dval[better]
        center_level[better] = li
        center_flat[better] = flat[better]

    return Assignment(
        np.concatenate(pos_level), np.concatenate(pos_flat),
        np.concatenate(pos_gt), center_level, center_flat,
    )


# ---------------------------------------------------------------------------
# losses


def focal_loss(scores, targets, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA,
               n_positives=None) -> float:
    """Focal loss on probability scores.

    ``scores`` is [G,C] with entries in (0,1); ``targets`` is [G] with the
    positive class id or -1 for background. Summed over every grid-class
    pair and normalized by max(1, number of positives).
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    g, c = scores.shape
    onehot = targets[:, None] == np.arange(c)[None, :]
    p_t = np.where(onehot, scores, 1.0 - scores)
    a_t = np.where(onehot, alpha, 1.0 - alpha)
    with np.errstate(divide="ignore"):
        logp = np.log(p_t)
    elem = np.where(p_t >= 1.0, 0.0, -a_t * (1.0 - p_t) ** gamma * logp)
    if n_positives is None:
        n_positives = int((targets >= 0).sum())
    return float(elem.sum() / max(1, n_positives))


def focal_loss_from_logits(z, targets, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA,
                           n_positives=None):
    """Focal loss and gradient computed stably from summed logits.

    ``z`` is [C,G]; ``targets`` [G]. Returns ``(loss, dloss_dz [C,G])``.
    """
    z = np.asarray(z, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    c, g = z.shape
    onehot = np.arange(c)[:, None] == targets[None, :]
    s = sigmoid(z)
    sp_neg = softplus(-z)   # -log(s)
    sp_pos = softplus(z)    # -log(1-s)
    pos_elem = alpha * (1.0 - s) ** gamma * sp_neg
    neg_elem = (1.0 - alpha) * s**gamma * sp_pos
    dpos = -alpha * (1.0 - s) ** gamma * (gamma * s * sp_neg + (1.0 - s))
    dneg = (1.0 - alpha) * s**gamma * (gamma * (1.0 - s) * sp_pos + s)
    elem = np.where(onehot, pos_elem, neg_elem)
    delem = np.where(onehot, dpos, dneg)
    if n_positives is None:
        n_positives = int((targets >= 0).sum())
    norm = 1.0 / max(1, n_positives)
    return float(elem.sum() * norm), delem * norm


def total_loss(l_cls: float, l_reg: float, l_reg2: float,
               lambda1: float = 2.0, lambda2: float = 0.5) -> float:
    """Loss balance: ``L_cls + lambda1*L_reg + lambda2*L_reg2``."""
    return l_cls + lambda1 * l_reg + lambda2 * l_reg2


def compute_losses(state: ModelState, gt: GroundTruth, lambda1=2.0, lambda2=0.5,
                   alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA, assignment=None,
                   assignment_rule: str = "coarse-iou"):
    """Losses plus the per-level collection gradients.

    Returns ``(total, components, level_grads, assignment)`` where
    ``level_grads`` feeds :meth:`DetectionModel.backward`.
    """
    cols = state.collections
    if assignment is None:
        assignment = assign_samples(cols, gt, rule=assignment_rule)
    n_levels = len(cols)
    m = len(gt)
    p = assignment.n_positives

    targets = [np.full(c.n_grids, -1, dtype=np.int64) for c in cols]
    for li, flat, gi in zip(assignment.pos_level, assignment.pos_flat, assignment.pos_gt):
        targets[li][flat] = gt.labels[gi]
    z_all = np.concatenate([c.z for c in cols], axis=1)
    t_all = np.concatenate(targets)
    l_cls, dz_all = focal_loss_from_logits(z_all, t_all, alpha, gamma, n_positives=p)

    level_grads = [{"gz": None, "gboxes": None, "gcoarse": None} for _ in cols]
    start = 0
    for li, c in enumerate(cols):
        level_grads[li]["gz"] = dz_all[:, start : start + c.n_grids]
        start += c.n_grids

    l_reg = 0.0
    if p > 0:
        pred = np.stack(
            [cols[li].boxes[flat] for li, flat in zip(assignment.pos_level, assignment.pos_flat)]
        )
        losses, gpred, _ = giou_loss_grad_array(pred, gt.boxes[assignment.pos_gt])
        l_reg = float(losses.mean())
        scale = lambda1 / p
        for k in range(p):
            li = assignment.pos_level[k]
            if level_grads[li]["gboxes"] is None:
                level_grads[li]["gboxes"] = np.zeros((cols[li].n_grids, 4))
            level_grads[li]["gboxes"][assignment.pos_flat[k]] += scale * gpred[k]

    l_reg2 = 0.0
    if m > 0:
        coarse_sel = np.stack(
            [cols[li].coarse[flat] for li, flat in zip(assignment.center_level, assignment.center_flat)]
        )
        losses2, gcoarse, _ = giou_loss_grad_array(coarse_sel, gt.boxes)
        l_reg2 = float(losses2.mean())
        scale = lambda2 / m
        for k in range(m):
            li = assignment.center_level[k]
            if level_grads[li]["gcoarse"] is None:
                level_grads[li]["gcoarse"] = np.zeros((cols[li].n_grids, 4))
            level_grads[li]["gcoarse"][assignment.center_flat[k]] += scale * gcoarse[k]

    total = total_loss(l_cls, l_reg, l_reg2, lambda1, lambda2)
    comps = {"l_cls": l_cls, "l_reg": l_reg, "l_reg2": l_reg2}
    return total, comps, level_grads, assignment


# ---------------------------------------------------------------------------
# optimization loop


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient goes non-finite. The model has
    been restored to the last parameters that produced a finite loss and is
    attached as ``model`` so callers can checkpoint it."""

    def __init__(self, iteration: int, detail: str, model=None):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration
        self.model = model


def lr_at(base_lr: float, it: int, total_iters: int) -> float:
    """Step schedule: x0.1 at 2/3 of the run and x0.01 at 8/9."""
    if it >= (8 * total_iters) // 9:
        return base_lr * 0.01
    if it >= (2 * total_iters) // 3:
        return base_lr * 0.1
    return base_lr


def run_training(model: DetectionModel, provider, iters: int, lr: float,
                 momentum: float = 0.9, weight_decay: float = 1e-4,
                 lambda1: float = 2.0, lambda2: float = 0.5,
                 max_grad_norm: float = 2.0, assignment_rule: str = "coarse-iou",
                 log_fn=None):
    """Optimize ``model`` for ``iters`` steps over scenes from ``provider``.

    ``provider(it)`` returns ``(image, GroundTruth)``. Gradients are clipped
    to a global norm of ``max_grad_norm`` before each step; single-scene
    batches occasionally spike otherwise and momentum then overshoots the
    coarse boxes into GIoU saturation. On divergence the model is restored
    to the last parameters that produced a finite loss and
    :class:`TrainingDiverged` is raised. Returns the loss history.
    """
    opt = SGD(model.parameters(), lr, momentum=momentum, weight_decay=weight_decay)
    history = []
    last_good = model.clone_params()
    for it in range(iters):
        image, gt = provider(it)
        try:
            state = model.forward(image)
            total, comps, level_grads, _ = compute_losses(
                state, gt, lambda1=lambda1, lambda2=lambda2,
                assignment_rule=assignment_rule,
            )
        except ValueError as e:
            # non-finite parameters trip a kernel guard mid-forward
            model.restore_params(last_good)
            raise TrainingDiverged(it, f"forward failed: {e}", model) from e
        if not np.isfinite(total):
            model.restore_params(last_good)
            raise TrainingDiverged(it, f"loss became {total}", model)
        last_good = model.clone_params()
        model.backward(state, level_grads)
        if max_grad_norm is not None:
            with np.errstate(over="ignore"):
                gnorm = np.sqrt(sum(float((p.grad**2).sum()) for p in model.parameters()))
            if not np.isfinite(gnorm):
                model.restore_params(last_good)
                raise TrainingDiverged(it, f"gradient norm became {gnorm}", model)
            if gnorm > max_grad_norm:
                scale = max_grad_norm / gnorm
                for p in model.parameters():
                    p.grad *= scale
        try:
            opt.step(lr=lr_at(lr, it, iters))
        except NonFiniteGradientError as e:
            model.restore_params(last_good)
            raise TrainingDiverged(it, str(e), model) from e
        entry = {"iter": it, **{k: float(v) for k, v in comps.items()}, "total": float(total)}
        history.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return history


def model_config_from(cfg: TrainConfig, mode: str = "decoupled") -> ModelConfig:
    return ModelConfig(
        classes=cfg.classes, n_semantic=cfg.n_semantic, levels=cfg.levels,
        neighbor_offsets=tuple(cfg.neighbor_set), mode=mode,
    )


def train_from_config(cfg: TrainConfig, mode: str = "decoupled",
                      assignment_rule: str = "coarse-iou", log_fn=None):
    """Build a model from the config and train it on generated scenes.

    Fully deterministic per seed. Returns ``(model, history)``.
    """
    model = DetectionModel(model_config_from(cfg, mode), seed=cfg.seed)

    def provider(it):
        return generate_scene(
            scene_seed(cfg.seed, 0, it), width=cfg.image_size, height=cfg.image_size,
            max_objects=cfg.max_objects, classes=cfg.classes,
        )

    history = run_training(
        model, provider, iters=cfg.iters, lr=cfg.lr, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay, lambda1=cfg.lambda1, lambda2=cfg.lambda2,
        assignment_rule=assignment_rule, log_fn=log_fn,
    )
    return model, history


def holdout_scenes(cfg: TrainConfig, count: int):
    """Evaluation scenes drawn from a stream disjoint from training."""
    return [
        generate_scene(
            scene_seed(cfg.seed, 1, i), width=cfg.image_size, height=cfg.image_size,
            max_objects=cfg.max_objects, classes=cfg.classes,
        )
        for i in range(count)
    ]
