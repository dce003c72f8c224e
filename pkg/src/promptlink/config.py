"""Flat `key = value` run configuration files.

One file fully describes a run (no layered overrides, no environment
variables), so experiment configs stay diffable. Unknown keys, type
mismatches and missing required paths are reported with line numbers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .training import TrainConfig


class ConfigError(ValueError):
    pass


_CHOICES = {
    "strategy": ("joint", "separated"),
    "prompt_mode": ("layerwise", "input_only"),
    "scorer": ("transe", "distmult", "conve", "text_only"),
    "lar_source": ("keyword", "random"),
    "sign_mode": ("corrected", "as_written"),
    "freeze_direction": ("bottom", "top"),
}

_RUN_KEYS = {
    "data_dir": (str, None),     # required for any command that touches data
    "temporal": (bool, False),
    "out_dir": (str, "runs/out"),
}


def _train_schema():
    schema = {}
    for f in dataclasses.fields(TrainConfig):
        schema[f.name] = (f.type if isinstance(f.type, type) else type(f.default), f.default)
    return schema


_SCHEMA = {**{k: v for k, v in _RUN_KEYS.items()}, **_train_schema()}


@dataclass
class RunConfig:
    data_dir: str | None
    temporal: bool
    out_dir: str
    train: TrainConfig

    def require_data_dir(self):
        if not self.data_dir:
            raise ConfigError("config is missing the required key 'data_dir'")
        return self.data_dir


def _parse_value(key, raw, typ, path, lineno):
    where = f"{path}:{lineno}"
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{where}: key {key!r} expects a boolean, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: key {key!r} expects an integer, got {raw!r}") from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: key {key!r} expects a number, got {raw!r}") from None
    value = raw
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(
            f"{where}: key {key!r} must be one of {', '.join(_CHOICES[key])}, got {value!r}")
    return value


def parse_config(path):
    """Read a config file into a RunConfig; every key has a documented default."""
    values = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
            key, raw = (s.strip() for s in stripped.split("=", 1))
            if key not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            typ = _SCHEMA[key][0] if _SCHEMA[key][1] is None else type(_SCHEMA[key][1])
            values[key] = _parse_value(key, raw, typ, path, lineno)

    train_kwargs = {k: v for k, v in values.items() if k not in _RUN_KEYS}
    cfg = TrainConfig(**train_kwargs)
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    return RunConfig(
        data_dir=values.get("data_dir", _RUN_KEYS["data_dir"][1]),
        temporal=values.get("temporal", _RUN_KEYS["temporal"][1]),
        out_dir=values.get("out_dir", _RUN_KEYS["out_dir"][1]),
        train=cfg,
    )


def default_config_text():
    """A commented config file listing every key with its default."""
    lines = ["# promptlink run configuration (key = value, '#' comments)"]
    for key, (typ, default) in _RUN_KEYS.items():
        shown = "" if default is None else default
        lines.append(f"{key} = {shown}")
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"{f.name} = {f.default}")
    return "\n".join(lines) + "\n"
