"""Plain ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment.  ``preset`` (tiny,
reference or default) picks the base values, every other key must be a
model field or one of the dataset keys below.  ``SPIKESTREAM_SEED`` in the
environment overrides ``seed``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .tensor import ConfigurationError

SEED_ENV = "SPIKESTREAM_SEED"
PRESETS = {"tiny": ModelConfig.tiny, "reference": ModelConfig.reference, "default": ModelConfig}
DATA_KEYS = {"items": 32, "len_min": 4, "len_max": 8}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ConfigurationError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(where + message)
        self.path = path
        self.line = line


def _field_types() -> dict:
    return {f.name: f.type for f in fields(ModelConfig)}


def coerce(key: str, raw: str, kind) -> object:
    kind = kind if isinstance(kind, str) else kind.__name__
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key} expects a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"{key} expects {kind}, got {raw!r}") from None
    return raw


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.reference)
    preset: str = "reference"
    items: int = DATA_KEYS["items"]
    len_min: int = DATA_KEYS["len_min"]
    len_max: int = DATA_KEYS["len_max"]
    sources: dict = field(default_factory=dict)  # key -> where the value came from

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "model": self.model.to_dict(),
            "data": {"items": self.items, "len_min": self.len_min, "len_max": self.len_max},
            "sources": dict(self.sources),
        }

    def override(self, source: str = "flag", **values) -> "RunConfig":
        """Apply already-typed overrides, skipping ``None``."""
        values = {k: v for k, v in values.items() if v is not None}
        model_kw = {k: v for k, v in values.items() if k in _field_types()}
        data_kw = {k: v for k, v in values.items() if k in DATA_KEYS}
        unknown = sorted(set(values) - set(model_kw) - set(data_kw))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        out = replace(self, model=replace(self.model, **model_kw), **data_kw)
        out.sources = {**self.sources, **{k: source for k in values}}
        return out


def _blame(base: ModelConfig, seen: dict, types: dict, fallback: int | None) -> int | None:
    """Line of the first key that is invalid on its own, else the last model key."""
    keys = sorted((k for k in seen if k in types), key=lambda k: seen[k][1])
    for k in keys:
        try:
            replace(base, **{k: seen[k][0]})
        except (ConfigurationError, ValueError):
            return seen[k][1]
    return seen[keys[-1]][1] if keys else fallback


def parse_text(text: str, path="<string>") -> RunConfig:
    types = _field_types()
    preset, preset_line = "reference", None
    seen: dict[str, tuple[object, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", path, lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("missing key before '='", path, lineno)
        if key in seen or (key == "preset" and preset_line is not None):
            raise ConfigError(f"duplicate key {key!r}", path, lineno)
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {raw!r}", path, lineno)
            preset, preset_line = raw, lineno
            continue
        if key in types:
            kind = types[key]
        elif key in DATA_KEYS:
            kind = "int"
        else:
            raise ConfigError(f"unknown key {key!r}", path, lineno)
        try:
            seen[key] = (coerce(key, raw, kind), lineno)
        except ValueError as exc:
            raise ConfigError(str(exc), path, lineno) from None

    base = PRESETS[preset]()
    model_kw = {k: v for k, (v, _) in seen.items() if k in types}
    try:
        model = replace(base, **model_kw)
    except (ConfigurationError, ValueError) as exc:
        raise ConfigError(str(exc), path, _blame(base, seen, types, preset_line)) from None
    cfg = RunConfig(model, preset, sources={k: f"{path}:{ln}" for k, (_, ln) in seen.items()})
    for key in DATA_KEYS:
        if key in seen:
            setattr(cfg, key, seen[key][0])
    if not 2 <= cfg.len_min <= cfg.len_max:
        line = seen.get("len_min", seen.get("len_max", (None, None)))[1]
        raise ConfigError(f"need 2 <= len_min <= len_max, got {cfg.len_min}, {cfg.len_max}", path, line)
    return apply_env(cfg)


def apply_env(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return cfg.override(source="env", seed=seed)


def load(path=None, preset: str = "reference") -> RunConfig:
    """Read a config file; with no path, the named preset plus environment."""
    if path is None:
        if preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {preset!r}")
        return apply_env(RunConfig(PRESETS[preset](), preset))
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_text(text, path)


def dump(cfg: RunConfig) -> str:
    """Render an equivalent config file (every model field spelled out)."""
    lines = [f"preset = {cfg.preset}"]
    for k, v in cfg.model.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    for k in DATA_KEYS:
        lines.append(f"{k} = {getattr(cfg, k)}")
    return "\n".join(lines) + "\n"
