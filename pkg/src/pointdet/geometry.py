"""Axis-aligned boxes, overlap metrics, and the GIoU loss with gradients.

Boxes are (l, t, r, b) in image-pixel coordinates with r >= l and b >= t;
zero-area boxes are legal. Array functions take [..., 4] float arrays in the
same coordinate order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Box",
    "iou",
    "giou",
    "giou_loss",
    "giou_loss_grad",
    "clamp_box",
    "iou_array",
    "iou_matrix",
    "giou_array",
    "giou_loss_grad_array",
    "fold_boxes",
]


@dataclass(frozen=True)
class Box:
    l: float
    t: float
    r: float
    b: float

    def __post_init__(self):
        for field in ("l", "t", "r", "b"):
            object.__setattr__(self, field, float(getattr(self, field)))
        if not all(np.isfinite([self.l, self.t, self.r, self.b])):
            raise ValueError(f"box coordinates must be finite, got {self}")
        if self.r < self.l or self.b < self.t:
            raise ValueError(f"invalid box (needs r >= l and b >= t): {self}")

    @property
    def width(self) -> float:
        return self.r - self.l

    @property
    def height(self) -> float:
        return self.b - self.t

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.l + self.r), 0.5 * (self.t + self.b))

    def as_array(self) -> np.ndarray:
        return np.array([self.l, self.t, self.r, self.b], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Box":
        return Box(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def clamp_box(box: Box, width: float, height: float) -> Box:
    """Clip a box to the image rectangle [0,width] x [0,height]."""
    if width <= 0 or height <= 0:
        raise ValueError(f"image extents must be positive, got {width}x{height}")
    return Box(
        min(max(box.l, 0.0), width),
        min(max(box.t, 0.0), height),
        min(max(box.r, 0.0), width),
        min(max(box.b, 0.0), height),
    )


# ---------------------------------------------------------------------------
# array core


def iou_array(a, b):
    """Element-wise IoU of two [..., 4] box arrays (0 when the union is 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    out = np.zeros(np.broadcast(inter, union).shape, dtype=np.float64)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou_matrix(a, b):
    """Pairwise IoU between [n,4] and [m,4] box arrays, shape [n,m]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return iou_array(a[:, None, :], b[None, :, :])


def giou_array(a, b):
    """Element-wise generalized IoU: IoU - (C - U)/C with C the smallest
    enclosing box area. Defined as 0 when both boxes are degenerate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = cw * ch
    shape = np.broadcast(union, enclose).shape
    out = np.zeros(shape, dtype=np.float64)
    ok = union > 0
    iou_v = np.divide(inter, union, out=np.zeros(shape), where=ok)
    penalty = np.divide(enclose - union, enclose, out=np.zeros(shape), where=enclose > 0)
    out = np.where(ok, iou_v - penalty, 0.0)
    return out


def fold_boxes(boxes):
    """Sort each box's coordinate pairs so r >= l and b >= t.

    Returns ``(folded, swap_x, swap_y)`` where the swap masks let a caller
    route gradients back to the original coordinates. Used as a guard for
    raw predicted boxes, which may come out inverted mid-training.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    swap_x = boxes[..., 0] > boxes[..., 2]
    swap_y = boxes[..., 1] > boxes[..., 3]
    folded = boxes.copy()
    folded[..., 0] = np.where(swap_x, boxes[..., 2], boxes[..., 0])
    folded[..., 2] = np.where(swap_x, boxes[..., 0], boxes[..., 2])
    folded[..., 1] = np.where(swap_y, boxes[..., 3], boxes[..., 1])
    folded[..., 3] = np.where(swap_y, boxes[..., 1], boxes[..., 3])
    return folded, swap_x, swap_y


def giou_loss_grad_array(pred, gt):
    """GIoU loss ``1 - giou`` and its gradients for [n,4] box arrays.

    Returns ``(loss [n], gpred [n,4], ggt [n,4])``. Ties in the min/max terms
    route the subgradient to the predicted box; degenerate pairs (union and
    enclosing area both zero) get loss 1 and zero gradient. Inverted
    predictions are folded to valid boxes first, with gradients routed
    through the swap.
    """
    pred_in = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pred, swap_x, swap_y = fold_boxes(pred_in)

    al, at, ar, ab = (pred[:, i] for i in range(4))
    bl, bt, br, bb = (gt[:, i] for i in range(4))

    wa = ar - al
    ha = ab - at
    area_a = wa * ha
    area_b = (br - bl) * (bb - bt)

    ix1 = np.maximum(al, bl)
    ix2 = np.minimum(ar, br)
    iy1 = np.maximum(at, bt)
    iy2 = np.minimum(ab, bb)
    iw = ix2 - ix1
    ih = iy2 - iy1
    act_x = iw > 0
    act_y = ih > 0
    iwp = np.clip(iw, 0.0, None)
    ihp = np.clip(ih, 0.0, None)
    inter = iwp * ihp
    union = area_a + area_b - inter

    cx1 = np.minimum(al, bl)
    cx2 = np.maximum(ar, br)
    cy1 = np.minimum(at, bt)
    cy2 = np.maximum(ab, bb)
    cw = cx2 - cx1
    chh = cy2 - cy1
    enclose = cw * chh

    ok = union > 0
    n = pred.shape[0]
    loss = np.ones(n, dtype=np.float64)
    safe_u = np.where(ok, union, 1.0)
    safe_c = np.where(enclose > 0, enclose, 1.0)
    giou_v = inter / safe_u + union / safe_c - 1.0
    loss[ok] = 1.0 - giou_v[ok]

    # partials of inter/union/enclose w.r.t. each coordinate of pred and gt
    both = (act_x & act_y).astype(np.float64)

    def grads_for(lo_x, hi_x, lo_y, hi_y, own_w, own_h, other_lo_x, other_hi_x,
                  other_lo_y, other_hi_y, tie_to_this):
        # indicator conventions: ties route to `tie_to_this` side
        if tie_to_this:
            d_ix1_lo = (lo_x >= other_lo_x).astype(np.float64)
            d_ix2_hi = (hi_x <= other_hi_x).astype(np.float64)
            d_iy1_lo = (lo_y >= other_lo_y).astype(np.float64)
            d_iy2_hi = (hi_y <= other_hi_y).astype(np.float64)
            d_cx1_lo = (lo_x <= other_lo_x).astype(np.float64)
            d_cx2_hi = (hi_x >= other_hi_x).astype(np.float64)
            d_cy1_lo = (lo_y <= other_lo_y).astype(np.float64)
            d_cy2_hi = (hi_y >= other_hi_y).astype(np.float64)
        else:
            d_ix1_lo = (lo_x > other_lo_x).astype(np.float64)
            d_ix2_hi = (hi_x < other_hi_x).astype(np.float64)
            d_iy1_lo = (lo_y > other_lo_y).astype(np.float64)
            d_iy2_hi = (hi_y < other_hi_y).astype(np.float64)
            d_cx1_lo = (lo_x < other_lo_x).astype(np.float64)
            d_cx2_hi = (hi_x > other_hi_x).astype(np.float64)
            d_cy1_lo = (lo_y < other_lo_y).astype(np.float64)
            d_cy2_hi = (hi_y > other_hi_y).astype(np.float64)

        di = np.zeros((n, 4))
        di[:, 0] = -both * d_ix1_lo * ihp
        di[:, 2] = both * d_ix2_hi * ihp
        di[:, 1] = -both * d_iy1_lo * iwp
        di[:, 3] = both * d_iy2_hi * iwp

        darea = np.zeros((n, 4))
        darea[:, 0] = -own_h
        darea[:, 2] = own_h
        darea[:, 1] = -own_w
        darea[:, 3] = own_w

        du = darea - di

        dc = np.zeros((n, 4))
        dc[:, 0] = -d_cx1_lo * chh
        dc[:, 2] = d_cx2_hi * chh
        dc[:, 1] = -d_cy1_lo * cw
        dc[:, 3] = d_cy2_hi * cw
        return di, du, dc

    di_a, du_a, dc_a = grads_for(al, ar, at, ab, wa, ha, bl, br, bt, bb, True)
    di_b, du_b, dc_b = grads_for(bl, br, bt, bb, br - bl, bb - bt, al, ar, at, ab, False)

    def chain(di, du, dc):
        # d giou = dI/U - I dU/U^2 + dU/C - U dC/C^2 ; d loss = -d giou
        g = (
            di / safe_u[:, None]
            - inter[:, None] * du / (safe_u**2)[:, None]
            + du / safe_c[:, None]
            - union[:, None] * dc / (safe_c**2)[:, None]
        )
        g = np.where(ok[:, None], -g, 0.0)
        return g

    gpred = chain(di_a, du_a, dc_a)
    ggt = chain(di_b, du_b, dc_b)

    # route gradients back through the fold
    gp = gpred.copy()
    gp[:, 0] = np.where(swap_x, gpred[:, 2], gpred[:, 0])
    gp[:, 2] = np.where(swap_x, gpred[:, 0], gpred[:, 2])
    gp[:, 1] = np.where(swap_y, gpred[:, 3], gpred[:, 1])
    gp[:, 3] = np.where(swap_y, gpred[:, 1], gpred[:, 3])
    return loss, gp, ggt


# ---------------------------------------------------------------------------
# scalar wrappers


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    return float(iou_array(a.as_array(), b.as_array()))


def giou(a: Box, b: Box) -> float:
    """Generalized IoU of two boxes, in (-1, 1]."""
    return float(giou_array(a.as_array(), b.as_array()))


def giou_loss(a: Box, b: Box) -> float:
    """GIoU loss ``1 - giou(a, b)``, in [0, 2)."""
    return 1.0 - giou(a, b)


def giou_loss_grad(a: Box, b: Box):
    """GIoU loss with gradients w.r.t. both boxes' (l,t,r,b) coordinates."""
    loss, ga, gb = giou_loss_grad_array(a.as_array()[None], b.as_array()[None])
    return float(loss[0]), ga[0], gb[0]
