"""Run configuration: TOML file plus ``key=value`` overrides, strictly validated."""
from __future__ import annotations

import dataclasses
import json
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ablation import AXES, ExperimentConfig
from .errors import ConfigurationError
from .model import ModelConfig
from .synth import STRATA, CompositionConfig
from .training import TrainConfig

SCHEMA_VERSION = 1
SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": CompositionConfig}


class ConfigError(ConfigurationError):
    """Unreadable or invalid configuration; carries the position for parse errors."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        super().__init__(message)
        self.line = line
        self.column = column


@dataclass
class Paths:
    manifest: str | None = None
    checkpoint: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    command: str | None = None
    seed: int = 0
    schema_version: int = SCHEMA_VERSION
    strata: list | None = None
    axes: list = field(default_factory=lambda: list(AXES))
    workers: int = 1
    paths: Paths = field(default_factory=Paths)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: CompositionConfig = field(default_factory=CompositionConfig)

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(self.model, self.train, self.data,
                                None if self.strata is None else tuple(self.strata), self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def snapshot(self) -> str:
        """Resolved configuration as TOML, readable back by :func:`load_config`."""
        d = self.to_dict()
        d.pop("command")
        lines = [f"# command: {self.command}"] if self.command else []
        for k, v in d.items():
            if not isinstance(v, dict) and v is not None:
                lines.append(f"{k} = {_toml_value(v)}")
        for k, v in d.items():
            if isinstance(v, dict):
                lines += ["", f"[{k}]"] + [f"{kk} = {_toml_value(vv)}" for kk, vv in v.items() if vv is not None]
        return "\n".join(lines) + "\n"

    def write_snapshot(self, out_dir) -> Path:
        p = Path(out_dir) / "resolved_config.toml"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.snapshot())
        return p


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if v == v and abs(v) != float("inf") else ("nan" if v != v else ("inf" if v > 0 else "-inf"))
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v)
    return str(v)


_POS = re.compile(r"at line (\d+), column (\d+)")


def parse_toml(text: str, source: str = "<config>") -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        line, col = getattr(e, "lineno", None), getattr(e, "colno", None)
        if line is None:
            m = _POS.search(str(e))
            line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        raise ConfigError(f"{source}:{line}:{col}: {e}", line, col) from e


def _coerce(cls, name: str, value, where: str):
    """Check a value against the dataclass field type, widening ints to floats."""
    f = {x.name: x for x in fields(cls)}[name]
    want = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if value is None:
        if "None" in want:
            return None
        raise ConfigError(f"{where}.{name} may not be empty")
    if want.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}.{name} must be true or false, got {value!r}")
        return value
    if want.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}.{name} must be an integer, got {value!r}")
        return value
    if want.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.{name} must be a number, got {value!r}")
        return float(value)
    if want.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{where}.{name} must be a string, got {value!r}")
        return value
    if want.startswith("tuple") or want.startswith("list"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}.{name} must be an array, got {value!r}")
        return tuple(value) if want.startswith("tuple") else list(value)
    return value


def _section(cls, raw: dict, where: str):
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"unknown key {where}.{k!r}")
    kwargs = {k: _coerce(cls, k, v, where) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{where}] {e}") from e


TOP_LEVEL = {"seed", "schema_version", "strata", "axes", "workers"}


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()  # bare words are strings
    return key.split("."), value


def _resolve_key(parts: list[str]) -> tuple[str, ...]:
    if len(parts) == 2:
        return tuple(parts)
    if len(parts) != 1:
        raise ConfigError(f"override key {'.'.join(parts)!r} is nested too deeply")
    name = parts[0]
    if name in TOP_LEVEL:
        return (name,)
    owners = [s for s, cls in list(SECTIONS.items()) + [("paths", Paths)] if name in {f.name for f in fields(cls)}]
    if not owners:
        raise ConfigError(f"unknown key {name!r}")
    if len(owners) > 1:
        raise ConfigError(f"key {name!r} is ambiguous; use one of {[f'{o}.{name}' for o in owners]}")
    return (owners[0], name)


def load_config(path=None, overrides: Sequence[str] = (), command: str | None = None) -> RunConfig:
    """Read ``path`` (None or empty means all defaults), apply overrides last, validate."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {str(p)!r} does not exist")
        raw = parse_toml(p.read_text(), str(p))
    for item in overrides:
        parts, value = _parse_override(item)
        key = _resolve_key(parts)
        if len(key) == 1:
            raw[key[0]] = value
        else:
            sec = raw.setdefault(key[0], {})
            if not isinstance(sec, dict):
                raise ConfigError(f"{key[0]!r} is not a section")
            sec[key[1]] = value
    return from_dict(raw, command)


def from_dict(raw: dict, command: str | None = None) -> RunConfig:
    known = TOP_LEVEL | set(SECTIONS) | {"paths"}
    for k in raw:
        if k not in known:
            raise ConfigError(f"unknown key {k!r}")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version!r} unsupported; expected {SCHEMA_VERSION}")
    for s in list(SECTIONS) + ["paths"]:
        if s in raw and not isinstance(raw[s], dict):
            raise ConfigError(f"{s!r} must be a section")
    sections = {s: _section(cls, raw.get(s, {}), s) for s, cls in SECTIONS.items()}
    paths = _section(Paths, raw.get("paths", {}), "paths")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    strata = raw.get("strata")
    if strata is not None:
        if not isinstance(strata, list) or set(strata) - set(STRATA):
            raise ConfigError(f"strata must be a subset of {list(STRATA)}, got {strata!r}")
    axes = raw.get("axes", list(AXES))
    if not isinstance(axes, list) or set(axes) - set(AXES):
        raise ConfigError(f"axes must be a subset of {list(AXES)}, got {axes!r}")
    workers = raw.get("workers", 1)
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        raise ConfigError(f"workers must be a positive integer, got {workers!r}")
    return RunConfig(command, seed, version, strata, axes, workers, paths, **sections)


def replace_paths(cfg: RunConfig, **kw) -> RunConfig:
    """Fill path fields that were given on the command line."""
    given = {k: v for k, v in kw.items() if v is not None}
    return dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, **{k: str(v) for k, v in given.items()}))
