"""Decoupled detection head.

Per pyramid level the head emits dense maps: four regression maps (one per
box side, values are image-space offsets once scaled by the level stride),
N*C classification logit maps, and the raw maps of the two-step point
generation module (coarse box, boundary shifts, semantic shifts, level
weights).

Collection then runs per grid: decode a coarse box, place one dynamic point
on each coarse edge and N semantic points inside, sample the regression maps
of the neighboring levels at the boundary points (blended with softmax level
weights), sample each semantic point's own classification map, and reduce to
a final box plus C class scores. Both a scalar per-grid form (the reference
semantics) and the vectorized form used in training are provided; they must
agree exactly.

Coordinate conventions: grid (i, j) at stride s sits at image point
((j+0.5)s, (i+0.5)s); image point x maps to level grid coordinate
x/s - 0.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .geometry import Box
from .layers import ConvLayer

__all__ = [
    "LevelMaps",
    "DynamicPointSet",
    "LevelCollection",
    "Head",
    "grid_center",
    "decode_coarse_box",
    "generate_boundary_points",
    "generate_semantic_points",
    "compute_level_weights",
    "collect_regression",
    "aggregate_classification",
    "available_levels",
    "semantic_prior_fractions",
    "CLASS_PRIOR",
]

# initial class probability after summing N logit maps (focal-loss friendly)
CLASS_PRIOR = 0.01
# initial coarse half-extent in strides: exp(0.7) ~ 2 strides per side, so
# level-0 boxes start near the small end of the object size range and each
# coarser level doubles, which hands objects to a size-matched level early
COARSE_BIAS = 0.7
# exp argument clamp in coarse decoding; keeps runaway raws from producing
# astronomically large boxes whose GIoU gradients vanish irrecoverably
COARSE_RAW_LIMIT = 6.0


@dataclass
class LevelMaps:
    """Dense raw outputs of one pyramid level."""

    stride: int
    reg: np.ndarray                 # [4,h,w], image offsets are reg*stride
    cls: np.ndarray                 # [N*C,h,w] logits
    coarse: np.ndarray              # [4,h,w]
    bshift: np.ndarray | None = None   # [4,h,w]
    sshift: np.ndarray | None = None   # [2N,h,w]
    lvlw: np.ndarray | None = None     # [4K,h,w]

    @property
    def h(self) -> int:
        return self.reg.shape[1]

    @property
    def w(self) -> int:
        return self.reg.shape[2]

    def cls_maps(self, classes: int) -> np.ndarray:
        """Classification maps reshaped to [N, classes, h, w]."""
        n = self.cls.shape[0] // classes
        return self.cls.reshape(n, classes, self.h, self.w)


@dataclass
class DynamicPointSet:
    """Per-grid bundle of coarse box, dynamic points, and level weights."""

    coarse: Box
    boundary: np.ndarray       # [4,2] (x,y) for sides l,t,r,b
    semantic: np.ndarray       # [N,2]
    level_weights: np.ndarray  # [4,K] over the grid's available levels


def grid_center(i: int, j: int, stride: float) -> tuple[float, float]:
    return ((j + 0.5) * stride, (i + 0.5) * stride)


def decode_coarse_box(center_x, center_y, stride, raw) -> Box:
    """Coarse box from raw 4-vector: side distances exp(raw)*stride.

    The raw values are clamped to +/-COARSE_RAW_LIMIT before exponentiation.
    """
    raw = np.clip(np.asarray(raw, dtype=np.float64), -COARSE_RAW_LIMIT, COARSE_RAW_LIMIT)
    d = np.exp(raw) * stride
    return Box(center_x - d[0], center_y - d[1], center_x + d[2], center_y + d[3])


def generate_boundary_points(coarse: Box, raw) -> np.ndarray:
    """One point per coarse edge: the midpoint shifted along the edge by
    tanh(raw) times half the edge length. Returns [4,2] in l,t,r,b order."""
    t = np.tanh(np.asarray(raw, dtype=np.float64))
    midx, midy = coarse.center
    hw = 0.5 * coarse.width
    hh = 0.5 * coarse.height
    return np.array(
        [
            [coarse.l, midy + t[0] * hh],
            [midx + t[1] * hw, coarse.t],
            [coarse.r, midy + t[2] * hh],
            [midx + t[3] * hw, coarse.b],
        ]
    )


def semantic_prior_fractions(n_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major prior grid fractions: point k sits at ((k%root+0.5)/root,
    (k//root+0.5)/root) of the coarse box. Requires n_points be square."""
    root = math.isqrt(n_points)
    if root * root != n_points:
        raise ValueError(f"semantic point count must be a perfect square, got {n_points}")
    k = np.arange(n_points)
    fx = (k % root + 0.5) / root
    fy = (k // root + 0.5) / root
    return fx, fy


def generate_semantic_points(coarse: Box, raw) -> np.ndarray:
    """N points: a uniform prior grid inside the coarse box, each shifted by
    tanh of its raw (x, y) pair times half the box extents. [N,2]."""
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.size // 2
    fx, fy = semantic_prior_fractions(n)
    t = np.tanh(raw.reshape(n, 2))
    x = coarse.l + fx * coarse.width + t[:, 0] * 0.5 * coarse.width
    y = coarse.t + fy * coarse.height + t[:, 1] * 0.5 * coarse.height
    return np.stack([x, y], axis=1)


def compute_level_weights(raw) -> np.ndarray:
    """Softmax over each side's K raw values. Input 4K flat (or [4,K]);
    output [4,K] rows positive and summing to 1."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        if raw.size % 4:
            raise ValueError(f"level-weight raw length {raw.size} is not 4*K")
        raw = raw.reshape(4, raw.size // 4)
    return ops.softmax(raw, axis=1)


def available_levels(s0: int, n_levels: int, offsets) -> list[tuple[int | None, int]]:
    """Neighbor levels for collection: ``(q, level)`` pairs where q indexes
    the configured offsets. Falls back to [(None, s0)] if truncation at the
    pyramid ends empties the set."""
    av = [(q, s0 + off) for q, off in enumerate(offsets) if 0 <= s0 + off < n_levels]
    if not av:
        av = [(None, s0)]
    return av


def collect_regression(level_maps, pts: DynamicPointSet, s0: int, offsets=(-1, 0)) -> Box:
    """Eq.-style box collection for one grid: per side, blend the bilinear
    regression samples of the available neighbor levels with the point set's
    level weights and add the boundary point's own coordinate."""
    avail = available_levels(s0, len(level_maps), offsets)
    weights = np.asarray(pts.level_weights, dtype=np.float64)
    if weights.shape != (4, len(avail)):
        raise ValueError(
            f"level weights shape {weights.shape} does not match {len(avail)} available levels"
        )
    out = np.empty(4)
    for side in range(4):
        x, y = pts.boundary[side]
        acc = 0.0
        for a, (_, li) in enumerate(avail):
            m = level_maps[li]
            v = ops.bilinear_sample(m.reg[side], x / m.stride - 0.5, y / m.stride - 0.5)
            acc += weights[side, a] * v * m.stride
        coord = x if side in (0, 2) else y
        out[side] = acc + coord
    return Box(min(out[0], out[2]), min(out[1], out[3]), max(out[0], out[2]), max(out[1], out[3]))


def aggregate_classification(cls_maps, semantic_pts, stride) -> np.ndarray:
    """Scores from semantic points: point i samples only its own map
    cls_maps[i] ([C,h,w]); the C-vector samples are summed and squashed."""
    cls_maps = np.asarray(cls_maps, dtype=np.float64)
    n, c = cls_maps.shape[0], cls_maps.shape[1]
    total = np.zeros(c)
    for i in range(n):
        x, y = semantic_pts[i]
        gx, gy = x / stride - 0.5, y / stride - 0.5
        vals, _ = ops.bilinear_gather(
            cls_maps[i], np.arange(c), np.full(c, gx), np.full(c, gy)
        )
        total += vals
    return ops.sigmoid(total)


# ---------------------------------------------------------------------------
# vectorized collection


@dataclass
class LevelCollection:
    """All per-grid collection results of one level, grids in row-major order."""

    level: int
    stride: int
    h: int
    w: int
    grid_cx: np.ndarray      # [G]
    grid_cy: np.ndarray      # [G]
    coarse: np.ndarray       # [G,4] L,T,R,B
    bx: np.ndarray           # [4,G] boundary point x per side
    by: np.ndarray           # [4,G]
    sx: np.ndarray           # [N,G] semantic point x
    sy: np.ndarray           # [N,G]
    weights: np.ndarray      # [4,K_av,G]
    avail: list              # [(q or None, level)]
    boxes: np.ndarray        # [G,4] final collected box (may be unfolded)
    z: np.ndarray            # [C,G] summed logits
    scores: np.ndarray       # [C,G]
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_grids(self) -> int:
        return self.h * self.w

    def pointset(self, flat_idx: int) -> DynamicPointSet:
        g = flat_idx
        coarse = Box(self.coarse[g, 0], self.coarse[g, 1], self.coarse[g, 2], self.coarse[g, 3])
        boundary = np.stack([self.bx[:, g], self.by[:, g]], axis=1)
        semantic = np.stack([self.sx[:, g], self.sy[:, g]], axis=1)
        return DynamicPointSet(coarse, boundary, semantic, self.weights[:, :, g].copy())


def collect_level(maps, i0: int, cfg) -> LevelCollection:
    """Vectorized per-grid collection for pyramid level ``i0``.

    ``cfg`` provides loc_decoupled, cls_decoupled, offsets, n_points,
    classes, root_n.
    """
    m0 = maps[i0]
    s0 = float(m0.stride)
    h, w = m0.h, m0.w
    g = h * w
    ii, jj = np.divmod(np.arange(g), w)
    cx = (jj + 0.5) * s0
    cy = (ii + 0.5) * s0

    cr = m0.coarse.reshape(4, g)
    cr_inside = np.abs(cr) < COARSE_RAW_LIMIT
    d = np.exp(np.clip(cr, -COARSE_RAW_LIMIT, COARSE_RAW_LIMIT)) * s0
    box_l = cx - d[0]
    box_t = cy - d[1]
    box_r = cx + d[2]
    box_b = cy + d[3]
    wbox = d[0] + d[2]
    hbox = d[1] + d[3]
    midx = 0.5 * (box_l + box_r)
    midy = 0.5 * (box_t + box_b)

    cache: dict = {"d": d, "cr_inside": cr_inside, "wbox": wbox, "hbox": hbox}

    if cfg.loc_decoupled:
        tb = np.tanh(m0.bshift.reshape(4, g))
        bx = np.stack([box_l, midx + tb[1] * 0.5 * wbox, box_r, midx + tb[3] * 0.5 * wbox])
        by = np.stack([midy + tb[0] * 0.5 * hbox, box_t, midy + tb[2] * 0.5 * hbox, box_b])
        cache["tb"] = tb
    else:
        bx = np.broadcast_to(cx, (4, g)).copy()
        by = np.broadcast_to(cy, (4, g)).copy()

    avail = available_levels(i0, len(maps), cfg.offsets)
    kav = len(avail)
    if cfg.loc_decoupled and m0.lvlw is not None and avail[0][0] is not None:
        k_model = m0.lvlw.shape[0] // 4
        lw = m0.lvlw.reshape(4, k_model, g)
        raws_av = lw[:, [q for q, _ in avail], :]
        weights = ops.softmax(raws_av, axis=1)
        cache["weights_from_softmax"] = True
    else:
        weights = np.full((4, kav, g), 1.0 / kav)
        cache["weights_from_softmax"] = False

    side_ch = np.repeat(np.arange(4), g)
    v_img = np.empty((kav, 4, g))
    reg_caches = []
    for a, (_, li) in enumerate(avail):
        sl = float(maps[li].stride)
        gx = bx / sl - 0.5
        gy = by / sl - 0.5
        vals, gc = ops.bilinear_gather(maps[li].reg, side_ch, gx.ravel(), gy.ravel())
        v_img[a] = vals.reshape(4, g) * sl
        reg_caches.append(gc)
    offset = np.einsum("akg,akg->kg", weights.transpose(1, 0, 2), v_img)
    boxes = np.stack(
        [offset[0] + bx[0], offset[1] + by[1], offset[2] + bx[2], offset[3] + by[3]], axis=1
    )
    cache["v_img"] = v_img
    cache["reg_caches"] = reg_caches

    n_pts = cfg.n_points
    c = cfg.classes
    if cfg.cls_decoupled:
        fx, fy = semantic_prior_fractions(n_pts)
        ts = np.tanh(m0.sshift.reshape(n_pts, 2, g))
        sx = box_l[None] + (fx[:, None] + 0.5 * ts[:, 0]) * wbox[None]
        sy = box_t[None] + (fy[:, None] + 0.5 * ts[:, 1]) * hbox[None]
        cache["ts"] = ts
        cache["prior_fx"] = fx
        cache["prior_fy"] = fy
    else:
        sx = cx[None].copy()
        sy = cy[None].copy()

    gsx = sx / s0 - 0.5
    gsy = sy / s0 - 0.5
    cls_ch = (np.arange(n_pts)[:, None, None] * c + np.arange(c)[None, :, None])
    cls_ch = np.broadcast_to(cls_ch, (n_pts, c, g))
    xs = np.broadcast_to(gsx[:, None, :], (n_pts, c, g))
    ys = np.broadcast_to(gsy[:, None, :], (n_pts, c, g))
    logits_flat, cls_cache = ops.bilinear_gather(m0.cls, cls_ch.ravel(), xs.ravel(), ys.ravel())
    logits = logits_flat.reshape(n_pts, c, g)
    z = logits.sum(axis=0)
    scores = ops.sigmoid(z)
    cache["cls_cache"] = cls_cache

    return LevelCollection(
        level=i0, stride=int(s0), h=h, w=w, grid_cx=cx, grid_cy=cy,
        coarse=np.stack([box_l, box_t, box_r, box_b], axis=1),
        bx=bx, by=by, sx=sx, sy=sy, weights=weights, avail=avail,
        boxes=boxes, z=z, scores=scores, _cache=cache,
    )


def collect_level_backward(maps, col: LevelCollection, cfg, gboxes, gz, gcoarse, gmaps) -> None:
    """Reverse the collection of one level.

    ``gboxes`` [G,4] is dLoss/d(final box), ``gz`` [C,G] is dLoss/d(summed
    logits), ``gcoarse`` [G,4] is the direct dLoss/d(coarse L,T,R,B); any may
    be None. Gradients accumulate into ``gmaps`` (per-level dicts of arrays
    keyed like LevelMaps fields).
    """
    cache = col._cache
    g = col.n_grids
    n_pts = cfg.n_points
    c = cfg.classes
    s0 = float(col.stride)
    d = cache["d"]
    wbox, hbox = cache["wbox"], cache["hbox"]

    box_grad_l = np.zeros(g)
    box_grad_t = np.zeros(g)
    box_grad_r = np.zeros(g)
    box_grad_b = np.zeros(g)
    if gcoarse is not None:
        box_grad_l += gcoarse[:, 0]
        box_grad_t += gcoarse[:, 1]
        box_grad_r += gcoarse[:, 2]
        box_grad_b += gcoarse[:, 3]

    gbx = np.zeros((4, g))
    gby = np.zeros((4, g))

    # classification path
    if gz is not None:
        glogits = np.broadcast_to(gz[None], (n_pts, c, g))
        _, gxs_flat, gys_flat = ops.bilinear_gather_backward(
            cache["cls_cache"], glogits.ravel(), gmaps[col.level]["cls"]
        )
        gsx = gxs_flat.reshape(n_pts, c, g).sum(axis=1) / s0
        gsy = gys_flat.reshape(n_pts, c, g).sum(axis=1) / s0
        if cfg.cls_decoupled:
            ts = cache["ts"]
            fx, fy = cache["prior_fx"], cache["prior_fy"]
            coef_x = fx[:, None] + 0.5 * ts[:, 0]
            coef_y = fy[:, None] + 0.5 * ts[:, 1]
            box_grad_l += (gsx * (1.0 - coef_x)).sum(axis=0)
            box_grad_r += (gsx * coef_x).sum(axis=0)
            box_grad_t += (gsy * (1.0 - coef_y)).sum(axis=0)
            box_grad_b += (gsy * coef_y).sum(axis=0)
            gts = np.empty((n_pts, 2, g))
            gts[:, 0] = gsx * 0.5 * wbox[None]
            gts[:, 1] = gsy * 0.5 * hbox[None]
            graw = gts * (1.0 - cache["ts"] ** 2)
            gmaps[col.level]["sshift"] += graw.reshape(2 * n_pts, col.h, col.w)
        # else: points are grid centers; nothing to propagate

    # regression path
    if gboxes is not None:
        goffset = gboxes.T.copy()  # [4,G]
        gbx[0] += gboxes[:, 0]
        gby[1] += gboxes[:, 1]
        gbx[2] += gboxes[:, 2]
        gby[3] += gboxes[:, 3]

        v_img = cache["v_img"]
        weights = col.weights
        gweights = goffset[None] * v_img if cache["weights_from_softmax"] else None
        for a, (_, li) in enumerate(col.avail):
            sl = float(maps[li].stride)
            gv_raw = goffset * weights[:, a, :] * sl
            _, gxs, gys = ops.bilinear_gather_backward(
                cache["reg_caches"][a], gv_raw.ravel(), gmaps[li]["reg"]
            )
            gbx += gxs.reshape(4, g) / sl
            gby += gys.reshape(4, g) / sl
        if gweights is not None:
            graws_av = ops.softmax_backward(weights, gweights.transpose(1, 0, 2).copy(), axis=1)
            lvlw_grad = gmaps[col.level]["lvlw"]
            k_model = lvlw_grad.shape[0] // 4
            lvlw_grad_v = lvlw_grad.reshape(4, k_model, g)
            for a, (q, _) in enumerate(col.avail):
                lvlw_grad_v[:, q, :] += graws_av[:, a, :]

    # boundary points -> coarse box / shift raws
    if cfg.loc_decoupled:
        tb = cache["tb"]
        box_grad_l += gbx[0]
        box_grad_r += gbx[2]
        box_grad_t += gby[1]
        box_grad_b += gby[3]
        # top/bottom x = mid + tb*w/2 ; left/right y = mid + tb*h/2
        gtb = np.empty((4, g))
        for side, gx_side in ((1, gbx[1]), (3, gbx[3])):
            box_grad_l += gx_side * (0.5 - 0.5 * tb[side])
            box_grad_r += gx_side * (0.5 + 0.5 * tb[side])
            gtb[side] = gx_side * 0.5 * wbox
        for side, gy_side in ((0, gby[0]), (2, gby[2])):
            box_grad_t += gy_side * (0.5 - 0.5 * tb[side])
            box_grad_b += gy_side * (0.5 + 0.5 * tb[side])
            gtb[side] = gy_side * 0.5 * hbox
        gmaps[col.level]["bshift"] += ((gtb * (1.0 - tb**2)).reshape(4, col.h, col.w))
    # else: boundary points are grid centers (constants)

    # coarse box L,T,R,B -> coarse raw via d = exp(clamped raw)*stride
    gd = np.stack([-box_grad_l, -box_grad_t, box_grad_r, box_grad_b])
    gmaps[col.level]["coarse"] += (gd * d * cache["cr_inside"]).reshape(4, col.h, col.w)


# ---------------------------------------------------------------------------
# head network


class Head:
    """Shared-weight conv branches applied to every pyramid level."""

    def __init__(self, cfg, rng):
        ch = cfg.channels
        self.cfg = cfg
        self.trunk_reg = [ConvLayer(f"head.reg{i}", ch, ch, rng) for i in range(2)]
        self.trunk_cls = [ConvLayer(f"head.cls{i}", ch, ch, rng) for i in range(2)]
        self.trunk_gen = [ConvLayer(f"head.gen{i}", ch, ch, rng) for i in range(2)]
        # per-side bias breaks the left/right (top/bottom) role symmetry at
        # init: boxes start properly oriented around their anchor, so the
        # GIoU loss never settles into a globally swapped solution
        self.out_reg = ConvLayer("head.out_reg", ch, 4, rng, weight_scale=0.05,
                                 bias_fill=np.array([-0.5, -0.5, 0.5, 0.5]))
        prior_bias = -math.log((1.0 - CLASS_PRIOR) / CLASS_PRIOR) / cfg.n_points
        self.out_cls = ConvLayer(
            "head.out_cls", ch, cfg.n_points * cfg.classes, rng,
            weight_scale=0.01, bias_fill=prior_bias,
        )
        self.out_coarse = ConvLayer(
            "head.out_coarse", ch, 4, rng, weight_scale=0.05, bias_fill=COARSE_BIAS
        )
        self.out_bshift = (
            ConvLayer("head.out_bshift", ch, 4, rng, weight_scale=0.01)
            if cfg.loc_decoupled else None
        )
        self.out_sshift = (
            ConvLayer("head.out_sshift", ch, 2 * cfg.n_points, rng, weight_scale=0.01)
            if cfg.cls_decoupled else None
        )
        self.out_lvlw = (
            ConvLayer("head.out_lvlw", ch, 4 * len(cfg.offsets), rng, weight_scale=0.01)
            if cfg.has_lvlw else None
        )

    def parameters(self):
        out = []
        for layer in self.trunk_reg + self.trunk_cls + self.trunk_gen:
            out.extend(layer.parameters())
        for layer in (self.out_reg, self.out_cls, self.out_coarse,
                      self.out_bshift, self.out_sshift, self.out_lvlw):
            if layer is not None:
                out.extend(layer.parameters())
        return out

    def _run_trunk(self, trunk, x):
        caches = []
        for layer in trunk:
            y, cc = layer.forward(x)
            act, mask = ops.relu(y)
            caches.append((cc, mask))
            x = act
        return x, caches

    def _trunk_backward(self, trunk, caches, g):
        for layer, (cc, mask) in zip(reversed(trunk), reversed(caches)):
            g = ops.relu_backward(mask, g)
            g = layer.backward(cc, g)
        return g

    def forward(self, feats, strides):
        maps = []
        caches = []
        for feat, stride in zip(feats, strides):
            f_reg, creg = self._run_trunk(self.trunk_reg, feat)
            f_cls, ccls = self._run_trunk(self.trunk_cls, feat)
            f_gen, cgen = self._run_trunk(self.trunk_gen, feat)
            reg, c_reg_out = self.out_reg.forward(f_reg)
            cls, c_cls_out = self.out_cls.forward(f_cls)
            coarse, c_coarse = self.out_coarse.forward(f_gen)
            level_cache = {
                "trunks": (creg, ccls, cgen),
                "outs": {"reg": c_reg_out, "cls": c_cls_out, "coarse": c_coarse},
            }
            kw = {}
            if self.out_bshift is not None:
                kw["bshift"], level_cache["outs"]["bshift"] = self.out_bshift.forward(f_gen)
            if self.out_sshift is not None:
                kw["sshift"], level_cache["outs"]["sshift"] = self.out_sshift.forward(f_gen)
            if self.out_lvlw is not None:
                kw["lvlw"], level_cache["outs"]["lvlw"] = self.out_lvlw.forward(f_gen)
            maps.append(LevelMaps(stride=stride, reg=reg, cls=cls, coarse=coarse, **kw))
            caches.append(level_cache)
        return maps, caches

    def backward(self, caches, gmaps):
        gfeats = []
        for level_cache, gm in zip(caches, gmaps):
            outs = level_cache["outs"]
            creg, ccls, cgen = level_cache["trunks"]
            g_reg_feat = self.out_reg.backward(outs["reg"], gm["reg"])
            g_cls_feat = self.out_cls.backward(outs["cls"], gm["cls"])
            g_gen_feat = self.out_coarse.backward(outs["coarse"], gm["coarse"])
            if self.out_bshift is not None:
                g_gen_feat += self.out_bshift.backward(outs["bshift"], gm["bshift"])
            if self.out_sshift is not None:
                g_gen_feat += self.out_sshift.backward(outs["sshift"], gm["sshift"])
            if self.out_lvlw is not None:
                g_gen_feat += self.out_lvlw.backward(outs["lvlw"], gm["lvlw"])
            gfeat = self._trunk_backward(self.trunk_reg, creg, g_reg_feat)
            gfeat = gfeat + self._trunk_backward(self.trunk_cls, ccls, g_cls_feat)
            gfeat = gfeat + self._trunk_backward(self.trunk_gen, cgen, g_gen_feat)
            gfeats.append(gfeat)
        return gfeats
