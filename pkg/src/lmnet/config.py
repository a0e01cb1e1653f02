"""Pipeline configuration: one JSON file covering projection, training,
NMS, synthesis, augmentation and default paths.

Unknown keys are rejected at any nesting level so typos cannot silently
fall back to defaults. ``dump_defaults`` followed by ``load_config``
reproduces the identical effective configuration.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import SynthConfig
from .errors import FormatError, InvalidArgumentError
from .geometry import ProjectionConfig
from .network import TrainConfig
from .postprocess import NmsConfig


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time z-axis rotation augmentation.

    ``replicas`` extra rotated copies are added per scene when enabled;
    angles are uniform within +-``angle_limit_deg``. ``per_object``
    rotates each instance cluster separately instead of the whole scene.
    """

    enabled: bool = False
    angle_limit_deg: float = 15.0
    replicas: int = 2
    per_object: bool = False

    def __post_init__(self):
        if self.angle_limit_deg < 0 or self.angle_limit_deg > 180:
            raise InvalidArgumentError("angle limit must be within [0, 180] degrees")
        if self.replicas < 0:
            raise InvalidArgumentError("replicas must be non-negative")


@dataclass(frozen=True)
class PathsConfig:
    weights: str = "weights.lmnw"
    dataset_dir: str = "dataset"
    output_dir: str = "out"


@dataclass(frozen=True)
class PipelineConfig:
    projection: ProjectionConfig = field(default_factory=ProjectionConfig.default)
    train: TrainConfig = field(default_factory=TrainConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


_SECTIONS = {
    "projection": ProjectionConfig,
    "train": TrainConfig,
    "nms": NmsConfig,
    "synth": SynthConfig,
    "augment": AugmentConfig,
    "paths": PathsConfig,
}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build_section(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise FormatError(f"config section {where!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise FormatError(f"unknown config key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        kwargs[f.name] = _tuplify(value) if not isinstance(value, dict) else value
    try:
        return cls(**kwargs)
    except InvalidArgumentError as exc:
        raise FormatError(f"invalid value in config section {where}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise FormatError("config root must be an object")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise FormatError(f"unknown config section(s): {', '.join(unknown)}")
    kwargs = {
        name: _build_section(cls, data[name], name)
        for name, cls in _SECTIONS.items()
        if name in data
    }
    return PipelineConfig(**kwargs)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: PipelineConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"
