"""key=value run configuration with typed defaults and strict key checking."""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .trainer import Geometry, TrainConfig


class ConfigError(ValueError):
    pass


def _defaults() -> dict[str, object]:
    out: dict[str, object] = {}
    for cls in (TrainConfig, Geometry):
        inst = cls()
        for f in fields(cls):
            out[f.name] = getattr(inst, f.name)
    out.update({"folds": 5, "fold_seed": 0})
    return out


DEFAULTS = _defaults()


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(lines, source: str = "<flags>") -> dict[str, object]:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line.strip()!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> dict[str, object]:
    """Defaults, then the config file, then explicit overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.update(parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path)))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, str(value)) if isinstance(value, str) else value
    return cfg


def split_config(cfg: dict[str, object]) -> tuple[TrainConfig, Geometry]:
    try:
        train = TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})
        geom = Geometry(**{f.name: cfg[f.name] for f in fields(Geometry)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return train, geom
