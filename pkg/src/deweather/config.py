"""INI-style run configuration: sections [data] [model] [match] [train] [loss]."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data_synth import INCONSISTENCIES, WEATHERS
from .fcm import MatchConfig
from .losses import LossWeights
from .models import BackboneConfig
from .training import TrainConfig, TrainConfigError

SECTIONS = ("data", "model", "match", "train", "loss")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    num_scenes: int = 8
    test_scenes: int = 24
    height: int = 32
    width: int = 32
    num_frames: int = 5
    density: float = 0.5
    weathers: tuple = WEATHERS
    inconsistency: tuple = INCONSISTENCIES
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(v.strip() for v in value.replace("+", ",").split(",") if v.strip())
    return value.strip()


def _apply(obj, items: dict, section: str):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in known or hasattr(known[key], "__dataclass_fields__"):
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            updates[key] = _coerce(raw, known[key])
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _split_model_section(items: dict) -> tuple[dict, dict]:
    # aggregator lives on TrainConfig but is a model choice in the file
    model = dict(items)
    train_extra = {k: model.pop(k) for k in list(model) if k == "aggregator"}
    return model, train_extra


def build_config(sections: dict) -> RunConfig:
    """Turn ``{section: {key: str}}`` into validated configs."""
    unknown = set(sections) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    data = _apply(DataConfig(), sections.get("data", {}), "data")
    if set(data.weathers) - set(WEATHERS) or set(data.inconsistency) - set(INCONSISTENCIES):
        raise ConfigError("[data] unknown weather or inconsistency kind")
    model_items, train_extra = _split_model_section(sections.get("model", {}))
    backbone = _apply(BackboneConfig(), model_items, "model")
    match = _apply(MatchConfig(), sections.get("match", {}), "match")
    weights = _apply(LossWeights(), sections.get("loss", {}), "loss")
    train_items = dict(sections.get("train", {}), **train_extra)
    try:
        base = TrainConfig(backbone=backbone, match=match, weights=weights)
    except TrainConfigError as exc:
        raise ConfigError(str(exc)) from exc
    train = _apply(base, train_items, "train")
    return RunConfig(data, train)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an optional config file, then apply ``section.key`` overrides."""
    sections: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str  # keys such as P and K are case-sensitive
        try:
            with open(Path(path)) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        sections = {s: dict(parser.items(s)) for s in parser.sections()}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sections.setdefault(section, {})[key] = str(value)
    return build_config(sections)
