"""Run configuration: a strict YAML file mapped onto typed sections.

Every section's random seed is derived from the single top-level ``seed``;
seeds are therefore not accepted inside sections.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Literal

import yaml

from .adapters import AdapterConfig
from .denoiser import DenoiserConfig
from .identity import IdentityTrainConfig
from .inference import EditConfig
from .motion import MotionTrainConfig
from .semantic import ThresholdPolicy

PATH_ENV = {
    "video_dir": "SUBJECT_EDIT_VIDEO_DIR",
    "refs_dir": "SUBJECT_EDIT_REFS_DIR",
    "checkpoints": "SUBJECT_EDIT_CHECKPOINTS",
    "outputs": "SUBJECT_EDIT_OUTPUTS",
}

# offsets from the global seed; fixed so that changing one stage never reseeds another
SEED_OFFSETS = {"autoencoder": 0, "denoiser": 0, "semantic": 1, "motion": 2, "identity": 3,
                "embedder": 4}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    spacing: Literal["scaled_linear", "linear"] = "scaled_linear"


@dataclass(frozen=True)
class AutoencoderConfig:
    patch: int = 8
    latent_channels: int = 4
    latent_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.patch < 1 or self.latent_channels < 1 or self.latent_scale <= 0:
            raise ValueError("patch and latent_channels must be >= 1 and latent_scale > 0")


@dataclass(frozen=True)
class SemanticConfig:
    patch: int = 28
    dim: int = 64
    mix: float = 0.5
    input_size: tuple[int, int] | None = (448, 448)  # None: nearest patch multiple
    resize_mode: Literal["nearest", "bilinear"] = "nearest"
    threshold: Literal["otsu", "quantile"] = "otsu"
    quantile: float = 0.5
    orientation: Literal["auto", "high", "low"] = "auto"

    def policy(self) -> ThresholdPolicy:
        return ThresholdPolicy(self.threshold, self.quantile, self.orientation)


@dataclass(frozen=True)
class PromptConfig:
    source: str = "a cat walking"
    class_word: str = "cat"
    identifier: str = "sks"


@dataclass(frozen=True)
class PathsConfig:
    video_dir: str | None = None
    refs_dir: str | None = None
    checkpoints: str = "checkpoints"
    outputs: str = "outputs"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    motion_training: MotionTrainConfig = field(default_factory=MotionTrainConfig)
    identity_training: IdentityTrainConfig = field(default_factory=IdentityTrainConfig)
    edit: EditConfig = field(default_factory=EditConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def seed_for(self, component: str) -> int:
        return self.seed + SEED_OFFSETS[component]

    @property
    def denoiser_config(self) -> DenoiserConfig:
        return replace(self.denoiser, seed=self.seed_for("denoiser"),
                       latent_channels=self.autoencoder.latent_channels)

    @property
    def motion_config(self) -> MotionTrainConfig:
        return replace(self.motion_training, seed=self.seed_for("motion"))

    @property
    def identity_config(self) -> IdentityTrainConfig:
        return replace(self.identity_training, seed=self.seed_for("identity"))


SECTIONS = {f.name: f for f in fields(RunConfig) if f.name != "seed"}
# fields owned elsewhere: seeds come from the global seed, latent width from the autoencoder
HIDDEN_FIELDS = {"seed", "latent_channels", "motion_layers_trainable"}
HIDDEN_BY_SECTION = {"denoiser": HIDDEN_FIELDS, "motion_training": {"seed"},
                     "identity_training": {"seed"}}


def _section_fields(name: str, cls: type) -> list[dataclasses.Field]:
    hidden = HIDDEN_BY_SECTION.get(name, set())
    return [f for f in fields(cls) if f.name not in hidden]


def _coerce(value: Any, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is Literal:
        if value not in args:
            raise ConfigError(f"{key}: {value!r} is not one of {list(args)}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _build_section(name: str, cls: type, data: Any) -> Any:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(data).__name__}")
    allowed = {f.name: f for f in _section_fields(name, cls)}
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]}")
    hints = typing.get_type_hints(cls)
    kwargs = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _resolve_paths(paths: PathsConfig, base: Path, use_env: bool) -> PathsConfig:
    values = {}
    for f in fields(PathsConfig):
        v = getattr(paths, f.name)
        if use_env and os.environ.get(PATH_ENV[f.name]):
            v = os.environ[PATH_ENV[f.name]]
        if v is not None:
            p = Path(v).expanduser()
            v = str(p if p.is_absolute() else (base / p).resolve())
        values[f.name] = v
    for key in ("video_dir", "refs_dir"):
        if values[key] is not None and not Path(values[key]).is_dir():
            raise ConfigError(f"paths.{key}: directory {values[key]} does not exist")
    return PathsConfig(**values)


def config_from_dict(data: dict | None, base_dir: str | Path = ".", use_env: bool = True) -> RunConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    seed = _coerce(data.get("seed", 0), int, "seed")
    hints = typing.get_type_hints(RunConfig)
    sections = {name: _build_section(name, hints[name], data.get(name)) for name in SECTIONS}
    sections["paths"] = _resolve_paths(sections["paths"], Path(base_dir), use_env)
    return RunConfig(seed=seed, **sections)


def load_config(path: str | Path, use_env: bool = True) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data, path.parent, use_env)


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict[str, Any] = {"seed": cfg.seed}
    for name in SECTIONS:
        section = getattr(cfg, name)
        out[name] = {
            f.name: list(v) if isinstance(v := getattr(section, f.name), tuple) else v
            for f in _section_fields(name, type(section))
        }
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
