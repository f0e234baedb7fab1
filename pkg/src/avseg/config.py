"""Plain-text configuration: one `dotted.key = value` per line, values in
JSON syntax (bare words fall back to strings). CLI flags override file values.

Key namespaces: train.*, model.*, data.*, infer.*, loss_weights.*, plus the
toggles crossover.enabled and audio.enabled.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSceneConfig
from .infer import InferenceConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(Exception):
    pass


def parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_file(path: str | Path) -> dict[str, object]:
    kv = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        kv[key.strip()] = parse_value(raw)
    return kv


@dataclass
class ResolvedConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)


_TUPLE_FIELDS = {"frame_size", "shape_radius", "motion"}


def _assign(obj, field_name: str, value, key: str):
    if not hasattr(obj, field_name):
        raise ConfigError(f"unknown config key {key!r}")
    if field_name in _TUPLE_FIELDS and isinstance(value, list):
        value = tuple(value)
    if field_name == "exclusive_groups":
        value = [tuple(g) for g in value]
    if field_name == "tone_map" and isinstance(value, dict):
        value = {int(k): float(v) for k, v in value.items()}
    setattr(obj, field_name, value)


def apply_keys(rc: ResolvedConfig, kv: dict[str, object]) -> ResolvedConfig:
    for key, value in kv.items():
        parts = key.split(".")
        ns = parts[0]
        if ns == "crossover" and parts[1:] == ["enabled"]:
            rc.train.crossover_enabled = bool(value)
        elif ns == "audio" and parts[1:] == ["enabled"]:
            rc.train.audio_enabled = bool(value)
        elif ns == "loss_weights" and len(parts) == 2:
            rc.train.loss_weights[parts[1]] = float(value)
        elif ns == "train" and len(parts) == 2:
            _assign(rc.train, parts[1], value, key)
        elif ns == "model" and len(parts) == 2:
            _assign(rc.model, parts[1], value, key)
        elif ns == "data" and len(parts) == 2:
            _assign(rc.data, parts[1], value, key)
        elif ns == "data" and len(parts) == 3 and parts[1] == "tone_map":
            rc.data.tone_map[int(parts[2])] = float(value)
        elif ns == "infer" and len(parts) == 2:
            _assign(rc.infer, parts[1], value, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return rc


def load_config(path: str | Path | None, overrides: dict[str, object] | None = None) -> ResolvedConfig:
    rc = ResolvedConfig()
    if path is not None:
        apply_keys(rc, parse_config_file(path))
    if overrides:
        apply_keys(rc, {k: v for k, v in overrides.items() if v is not None})
    return rc


def flatten(rc: ResolvedConfig) -> dict[str, object]:
    out = {}
    for ns in ("train", "model", "data", "infer"):
        obj = getattr(rc, ns)
        for f in dataclasses.fields(obj):
            out[f"{ns}.{f.name}"] = getattr(obj, f.name)
    return out


def resolved_text(rc: ResolvedConfig) -> str:
    lines = [f"{k} = {json.dumps(v, default=str)}" for k, v in sorted(flatten(rc).items())]
    return "\n".join(lines)
