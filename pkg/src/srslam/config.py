"""Pipeline configuration: nested dataclasses loaded from and dumped to YAML.

Environment overrides use ``SRSLAM_<SECTION>__<FIELD>`` for section fields
and ``SRSLAM_<FIELD>`` for top-level fields; values are parsed as YAML
scalars.
"""

from __future__ import annotations

import dataclasses
import enum
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import yaml

from .assessment import AssessmentConfig
from .backend.keyframes import KeyframeConfig
from .culling.strategy import CullingConfig
from .errors import ConfigError
from .pose_engine.direct import DirectConfig

ENV_PREFIX = "SRSLAM_"
SECTIONS = ("assessment", "culling", "direct", "keyframes")


@dataclass(frozen=True)
class PipelineConfig:
    assessment: AssessmentConfig = field(default_factory=AssessmentConfig)
    culling: CullingConfig = field(default_factory=CullingConfig)
    direct: DirectConfig = field(default_factory=DirectConfig)
    keyframes: KeyframeConfig = field(default_factory=KeyframeConfig)
    deterministic: bool = False
    report_dir: Optional[str] = None
    max_features: int = 1000
    association_tolerance: float = 0.02
    detection_tolerance: float = 0.02
    dynamic_classes: tuple = ("person",)
    ba_every: int = 5
    ba_window: int = 8
    pose_prior_sigma_t: float = 0.01  # m
    pose_prior_sigma_r: float = 0.01  # rad

    def __post_init__(self):
        if self.max_features < 1 or self.ba_every < 1 or not 2 <= self.ba_window <= 8:
            raise ConfigError("max_features, ba_every must be >= 1 and ba_window in [2, 8]")
        if not (self.pose_prior_sigma_t > 0 and self.pose_prior_sigma_r > 0):
            raise ConfigError("pose prior sigmas must be positive")
        object.__setattr__(self, "dynamic_classes", tuple(self.dynamic_classes))


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, where)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(f"{where}: {value!r} is not one of {[m.value for m in tp]}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        return str(value)
    if tp is tuple:
        if isinstance(value, str):
            value = [value]
        return tuple(value)
    return value


def from_dict(cls, data: Optional[Mapping], where: str = "config"):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    data = {} if data is None else data
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, enum.Enum):
            v = v.value
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _field_name(cls, lowered: str) -> str:
    """Actual field name of ``cls`` matching an upper-cased env suffix."""
    for f in dataclasses.fields(cls):
        if f.name.lower() == lowered:
            return f.name
    return lowered


def apply_env(data: dict, env: Optional[Mapping[str, str]] = None) -> dict:
    """Return ``data`` with ``SRSLAM_*`` overrides merged in."""
    env = os.environ if env is None else env
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for key in sorted(env):
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX) :].lower()
        try:
            value = yaml.safe_load(env[key])
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if "__" in name:
            section, fld = name.split("__", 1)
            if section not in SECTIONS:
                raise ConfigError(f"{key}: unknown section {section!r}")
            cls = typing.get_type_hints(PipelineConfig)[section]
            fld = _field_name(cls, fld)
            data.setdefault(section, {})
            data[section][fld] = value
        else:
            data[_field_name(PipelineConfig, name)] = value
    return data


def load_config(path=None, env: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(PipelineConfig, apply_env(data, env))


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
