"""Full detection model: backbone pyramid + decoupled head + collection.

The model owns all parameters, runs the fixed forward pipeline, and
backpropagates hand-written gradients. ``mode`` selects how predictions are
collected:

  * ``decoupled``  - dynamic boundary points + semantic points (the default)
  * ``coupled``    - both targets read at the grid location itself, N=1,
                     single-level collection (the forced baseline)
  * ``loc-only``   - only localization decoupled
  * ``cls-only``   - only classification decoupled
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .head import Head, LevelCollection, LevelMaps, collect_level, collect_level_backward

MODES = ("decoupled", "coupled", "loc-only", "cls-only")

__all__ = ["ModelConfig", "DetectionModel", "ModelState", "MODES"]


@dataclass(frozen=True)
class ModelConfig:
    classes: int = 3
    n_semantic: int = 9
    channels: int = 32
    levels: int = 3
    base_stride: int = 4
    neighbor_offsets: tuple = (-1, 0)
    mode: str = "decoupled"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.classes < 1:
            raise ValueError("need at least one class")
        root = math.isqrt(self.n_semantic)
        if root * root != self.n_semantic:
            raise ValueError(
                f"semantic point count must be a perfect square, got {self.n_semantic}"
            )
        offs = tuple(sorted(set(int(o) for o in self.neighbor_offsets)))
        if not offs:
            raise ValueError("neighbor offset set must not be empty")
        object.__setattr__(self, "neighbor_offsets", offs)

    @property
    def loc_decoupled(self) -> bool:
        return self.mode in ("decoupled", "loc-only")

    @property
    def cls_decoupled(self) -> bool:
        return self.mode in ("decoupled", "cls-only")

    @property
    def n_points(self) -> int:
        return self.n_semantic if self.cls_decoupled else 1

    @property
    def root_n(self) -> int:
        return math.isqrt(self.n_points)

    @property
    def offsets(self) -> tuple:
        return self.neighbor_offsets if self.loc_decoupled else (0,)

    @property
    def has_lvlw(self) -> bool:
        return self.loc_decoupled and len(self.offsets) > 1

    @property
    def strides(self) -> tuple:
        return tuple(self.base_stride * (1 << i) for i in range(self.levels))


@dataclass
class ModelState:
    """Forward pass artifacts: features, dense maps, per-level collections."""

    image_shape: tuple
    feats: list
    maps: list[LevelMaps]
    collections: list[LevelCollection]
    _bcache: list = field(repr=False, default_factory=list)
    _hcache: list = field(repr=False, default_factory=list)

    @property
    def n_grids(self) -> int:
        return sum(c.n_grids for c in self.collections)


_MODE_IDS = {m: i for i, m in enumerate(MODES)}


class DetectionModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([17, seed]))
        self.backbone = Backbone(rng, channels=config.channels, levels=config.levels,
                                 base_stride=config.base_stride)
        self.head = Head(config, rng)

    def parameters(self):
        return self.backbone.parameters() + self.head.parameters()

    def param_dict(self):
        return {p.name: p for p in self.parameters()}

    # ------------------------------------------------------------------
    def forward(self, image) -> ModelState:
        feats, bcache = self.backbone.forward(image)
        maps, hcache = self.head.forward(feats, self.backbone.strides)
        collections = [collect_level(maps, i, self.config) for i in range(len(maps))]
        return ModelState(
            image_shape=tuple(np.shape(image)), feats=feats, maps=maps,
            collections=collections, _bcache=bcache, _hcache=hcache,
        )

    def backward(self, state: ModelState, level_grads) -> None:
        """Accumulate parameter gradients.

        ``level_grads`` is a per-level list of dicts with optional entries
        ``gboxes`` [G,4], ``gz`` [C,G], ``gcoarse`` [G,4].
        """
        gmaps = []
        for m in state.maps:
            buf = {
                "reg": np.zeros_like(m.reg),
                "cls": np.zeros_like(m.cls),
                "coarse": np.zeros_like(m.coarse),
            }
            if m.bshift is not None:
                buf["bshift"] = np.zeros_like(m.bshift)
            if m.sshift is not None:
                buf["sshift"] = np.zeros_like(m.sshift)
            if m.lvlw is not None:
                buf["lvlw"] = np.zeros_like(m.lvlw)
            gmaps.append(buf)
        for col, grads in zip(state.collections, level_grads):
            collect_level_backward(
                state.maps, col, self.config,
                grads.get("gboxes"), grads.get("gz"), grads.get("gcoarse"), gmaps,
            )
        gfeats = self.head.backward(state._hcache, gmaps)
        self.backbone.backward(state._bcache, gfeats)

    # ------------------------------------------------------------------
    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def save(self, path) -> None:
        cfg = self.config
        records = [
            ("meta.format_version", np.array([1.0])),
            ("meta.mode", np.array([float(_MODE_IDS[cfg.mode])])),
            ("meta.classes", np.array([float(cfg.classes)])),
            ("meta.n_semantic", np.array([float(cfg.n_semantic)])),
            ("meta.channels", np.array([float(cfg.channels)])),
            ("meta.levels", np.array([float(cfg.levels)])),
            ("meta.base_stride", np.array([float(cfg.base_stride)])),
            ("meta.neighbor_offsets", np.array([float(o) for o in cfg.neighbor_offsets])),
        ]
        records.extend((p.name, p.value) for p in self.parameters())
        save_checkpoint(path, records)

    @classmethod
    def load(cls, path) -> "DetectionModel":
        arrays = load_checkpoint(path)
        try:
            cfg = ModelConfig(
                classes=int(arrays["meta.classes"][0]),
                n_semantic=int(arrays["meta.n_semantic"][0]),
                channels=int(arrays["meta.channels"][0]),
                levels=int(arrays["meta.levels"][0]),
                base_stride=int(arrays["meta.base_stride"][0]),
                neighbor_offsets=tuple(int(o) for o in arrays["meta.neighbor_offsets"]),
                mode=MODES[int(arrays["meta.mode"][0])],
            )
        except KeyError as e:
            raise ValueError(f"checkpoint {path!r} is missing metadata record {e}") from e
        model = cls(cfg, seed=0)
        for p in model.parameters():
            if p.name not in arrays:
                raise ValueError(f"checkpoint {path!r} is missing parameter {p.name!r}")
            stored = arrays[p.name]
            if stored.shape != p.value.shape:
                raise ValueError(
                    f"checkpoint parameter {p.name!r} has shape {stored.shape}, "
                    f"model expects {p.value.shape}"
                )
            p.value[...] = stored
        return model

    def clone_params(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def restore_params(self, snapshot: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.value[...] = snapshot[p.name]
