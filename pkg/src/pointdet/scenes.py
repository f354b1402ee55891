"""Synthetic detection scenes: colored rectangles on a noisy background.

Scenes are fully determined by their seed. Class identity is color coded;
boxes are integer pixel rectangles at least 8 px per side, with limited
mutual overlap so every object stays visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import iou_array

__all__ = ["GroundTruth", "generate_scene", "class_color", "scene_seed"]

_BASE_PALETTE = np.array(
    [
        [0.85, 0.25, 0.22],
        [0.25, 0.78, 0.30],
        [0.25, 0.38, 0.88],
        [0.85, 0.75, 0.22],
        [0.75, 0.28, 0.80],
        [0.25, 0.78, 0.78],
    ]
)

_MIN_SIDE = 10
_MAX_SIDE = 36
_MAX_PAIR_IOU = 0.25
_BG_LEVEL = 0.45
_BG_NOISE = 0.06
_FILL_NOISE = 0.03


@dataclass
class GroundTruth:
    boxes: np.ndarray   # [M,4] (l,t,r,b) floats
    labels: np.ndarray  # [M] ints in [0, classes)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError(
                f"{len(self.boxes)} boxes but {len(self.labels)} labels"
            )
        if np.any(self.boxes[:, 2] < self.boxes[:, 0]) or np.any(
            self.boxes[:, 3] < self.boxes[:, 1]
        ):
            raise ValueError("ground-truth boxes must satisfy r >= l and b >= t")

    def __len__(self) -> int:
        return len(self.labels)


def class_color(label: int, classes: int) -> np.ndarray:
    """Deterministic base color per class; hue wheel past the palette."""
    if label < len(_BASE_PALETTE):
        return _BASE_PALETTE[label].copy()
    phase = 2.0 * np.pi * (label / classes)
    return 0.5 + 0.35 * np.array(
        [np.sin(phase), np.sin(phase + 2.1), np.sin(phase + 4.2)]
    )


def scene_seed(base_seed: int, stream: int, index: int) -> np.random.SeedSequence:
    """Namespaced seed for scene ``index`` of a stream (0=train, 1=holdout)."""
    return np.random.SeedSequence([base_seed, stream, index])


def generate_scene(seed, width: int = 64, height: int = 64, max_objects: int = 3,
                   classes: int = 3, size_range=(_MIN_SIDE, _MAX_SIDE)):
    """Render one scene. ``seed`` is an int or a numpy SeedSequence.

    Returns ``(image [3,H,W] float64 in [0,1], GroundTruth)``; the rendered
    pixel extent of each rectangle matches its box coordinates. ``size_range``
    bounds the drawn side lengths (min 8 px).
    """
    if max_objects < 1:
        raise ValueError("max_objects must be at least 1")
    lo_side = max(8, int(size_range[0]))
    rng = np.random.default_rng(seed)
    image = _BG_LEVEL + rng.normal(0.0, _BG_NOISE, size=(3, height, width))

    hi_w = min(int(size_range[1]), width - 2)
    hi_h = min(int(size_range[1]), height - 2)
    n_target = int(rng.integers(1, max_objects + 1))
    boxes: list[np.ndarray] = []
    labels: list[int] = []
    for _ in range(n_target):
        for _try in range(40):
            bw = int(rng.integers(lo_side, hi_w + 1))
            bh = int(rng.integers(lo_side, hi_h + 1))
            l = int(rng.integers(1, width - bw))
            t = int(rng.integers(1, height - bh))
            cand = np.array([l, t, l + bw, t + bh], dtype=np.float64)
            if boxes:
                ious = iou_array(np.stack(boxes), cand[None])
                if float(ious.max()) > _MAX_PAIR_IOU:
                    continue
            boxes.append(cand)
            labels.append(int(rng.integers(0, classes)))
            break

    for box, label in zip(boxes, labels):
        l, t, r, b = (int(v) for v in box)
        color = class_color(label, classes) + rng.normal(0.0, 0.04, size=3)
        patch = color[:, None, None] + rng.normal(
            0.0, _FILL_NOISE, size=(3, b - t, r - l)
        )
        image[:, t:b, l:r] = patch

    np.clip(image, 0.0, 1.0, out=image)
    if boxes:
        gt = GroundTruth(np.stack(boxes), np.array(labels))
    else:  # cannot happen with the placement retry budget, but stay safe
        gt = GroundTruth(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    return image, gt
