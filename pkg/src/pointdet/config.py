"""Training configuration and the line-oriented ``key = value`` file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

__all__ = ["TrainConfig", "parse_config_text", "load_config", "format_config"]


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iters: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambda1: float = 2.0
    lambda2: float = 0.5
    n_semantic: int = 9
    classes: int = 3
    image_size: int = 64
    max_objects: int = 3
    levels: int = 3
    neighbor_set: tuple = (-1, 0)
    out_dir: str = "runs/default"


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key == "out_dir":
        return raw
    if key == "neighbor_set":
        try:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip() != "")
        except ValueError:
            raise ValueError(f"config key 'neighbor_set' expects comma-separated ints, got {raw!r}")
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r} expects a {kind}, got {raw!r}")


def parse_config_text(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; blank lines and ``#`` comments allowed.

    Unknown keys are an error.
    """
    cfg = TrainConfig()
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno} is not 'key = value': {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r} on line {lineno}")
        seen[key] = _parse_value(key, raw)
    return replace(cfg, **seen)


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        val = getattr(cfg, f.name)
        if f.name == "neighbor_set":
            val = ",".join(str(v) for v in val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
