"""Flat run configuration: defaults < config file < environment < command line.

Config files hold ``key = value`` lines; ``#`` starts a comment. Every key of
:class:`ModelConfig`, :class:`TrainConfig` and :class:`LossConfig` is accepted,
plus the dataset keys below. Environment variables ``MANETLAB_<KEY>`` (upper
case) override the file, command-line ``--set key=value`` overrides both.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .objectives import LossConfig
from .training import TrainConfig

ENV_PREFIX = "MANETLAB_"
RESOLVED_NAME = "config.resolved"


@dataclass(frozen=True)
class DataConfig:
    data_seed: int = 0
    num_ids: int = 32
    images_per_id: int = 8
    holdout_per_id: int = 2
    clutter_block: int = 4


SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "loss": LossConfig}


def _field_types() -> dict[str, tuple[str, type]]:
    out = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if f.name in out:
                raise RuntimeError(f"config key {f.name} defined twice")
            out[f.name] = (section, hints[f.name])
    return out


FIELDS = _field_types()


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


def parse_value(key: str, text: str):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELDS[key][1]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, float, str):
            return kind(text)
        if typing.get_origin(kind) is tuple:
            inner = typing.get_args(kind)[0]
            parts = [p for p in text.replace(" ", "").strip("()").split(",") if p]
            return tuple(inner(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_lines(lines: Sequence[str], source: str = "<config>") -> dict[str, object]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def read_config_file(path: str | Path) -> dict[str, object]:
    path = Path(path)
    return parse_lines(path.read_text().splitlines(), str(path))


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, object]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            out[name[len(ENV_PREFIX):].lower()] = parse_value(name[len(ENV_PREFIX):].lower(), value)
    return out


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def flat(self) -> dict[str, object]:
        out = {}
        for section in SECTIONS:
            out.update(dataclasses.asdict(getattr(self, section)))
        return out

    def updated(self, values: Mapping[str, object]) -> "RunConfig":
        grouped: dict[str, dict] = {s: {} for s in SECTIONS}
        for key, value in values.items():
            if key not in FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            grouped[FIELDS[key][0]][key] = value
        try:
            return RunConfig(**{s: dataclasses.replace(getattr(self, s), **grouped[s])
                                for s in SECTIONS})
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.flat().items()))

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / RESOLVED_NAME
        path.write_text(self.dumps())
        return path


def resolve(config_file: str | Path | None = None, overrides: Sequence[str] = (),
            environ: Mapping[str, str] | None = None, base: Mapping[str, object] | None = None) -> RunConfig:
    """Merge the layers; ``overrides`` are ``key=value`` strings from the command line."""
    cfg = RunConfig()
    if base:
        cfg = cfg.updated(base)
    if config_file is not None:
        cfg = cfg.updated(read_config_file(config_file))
    cfg = cfg.updated(env_overrides(environ))
    return cfg.updated(parse_lines(list(overrides), "--set"))
