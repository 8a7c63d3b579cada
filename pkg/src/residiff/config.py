"""Run configuration: one structured YAML file with typed sections.

Sections mirror the subsystems (data, guidance, networks, model, losses,
schedule, train, sample). Every CLI flag overrides its config key, and
generic overrides use dotted paths like ``train.iterations=500``. All
validation happens at construction, before any compute is allocated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError, ParameterError
from .guidance import GuidanceConfig
from .losses import LossWeights
from .networks import ModelSpec

__all__ = [
    "DataConfig",
    "NetworkConfig",
    "ScheduleConfig",
    "TrainConfig",
    "SampleConfig",
    "RunConfig",
    "load_config",
    "apply_overrides",
]


@dataclass(frozen=True)
class DataConfig:
    drf: float = 100.0
    count_scale: float = 1e4

    def __post_init__(self):
        if self.drf < 1.0:
            raise ParameterError(f"data.drf={self.drf} must be >= 1")
        if self.count_scale <= 0.0:
            raise ParameterError(f"data.count_scale={self.count_scale} must be positive")


@dataclass(frozen=True)
class NetworkConfig:
    cpm_base_channels: int = 96
    denoiser_base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    gamma_embedding_dim: int = 128
    aux_width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if min(self.cpm_base_channels, self.denoiser_base_channels, self.aux_width) < 1:
            raise ParameterError("channel widths must be positive")
        if not self.channel_multipliers:
            raise ParameterError("channel_multipliers cannot be empty")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    steps: int = 2000
    beta_start: float = 1e-6
    beta_end: float = 0.01

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"schedule.steps={self.steps} must be >= 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ParameterError("schedule betas must satisfy 0 < start <= end < 1")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 4
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 500
    n_negatives: int = 10
    detach_residual: bool = False

    def __post_init__(self):
        for name in ("iterations", "batch_size", "checkpoint_every", "eval_every"):
            if getattr(self, name) < 1:
                raise ParameterError(f"train.{name} must be >= 1")
        if self.learning_rate <= 0.0:
            raise ParameterError("train.learning_rate must be positive")
        if self.n_negatives < 0:
            raise ParameterError("train.n_negatives must be >= 0")


@dataclass(frozen=True)
class SampleConfig:
    n_inference_steps: int = 10
    n_samples_for_ams: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_inference_steps < 1:
            raise ParameterError("sample.n_inference_steps must be >= 1")
        if self.n_samples_for_ams < 1:
            raise ParameterError("sample.n_samples_for_ams must be >= 1")


_SECTION_TYPES = {
    "data": DataConfig,
    "guidance": GuidanceConfig,
    "networks": NetworkConfig,
    "model": ModelSpec,
    "losses": LossWeights,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    losses: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def __post_init__(self):
        if self.sample.n_inference_steps > self.schedule.steps:
            raise ConfigurationError(
                f"sample.n_inference_steps={self.sample.n_inference_steps} exceeds "
                f"schedule.steps={self.schedule.steps}"
            )
        if self.model.uses_guidance and self.guidance.pyramid_levels != len(
            self.networks.channel_multipliers
        ):
            raise ConfigurationError(
                f"guidance.pyramid_levels={self.guidance.pyramid_levels} must match the "
                f"{len(self.networks.channel_multipliers)} encoder levels"
            )
        if self.model.use_cpm and self.model.use_irm:
            if self.networks.cpm_base_channels <= self.networks.denoiser_base_channels:
                raise ConfigurationError(
                    "networks.cpm_base_channels must exceed networks.denoiser_base_channels"
                )

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTION_TYPES:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {
                k: list(v) if isinstance(v, tuple) else v for k, v in section.items()
            }
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("configuration root must be a mapping")
        unknown = set(raw) - set(_SECTION_TYPES)
        if unknown:
            raise ConfigurationError(f"unknown configuration sections: {sorted(unknown)}")
        sections = {}
        for name, section_type in _SECTION_TYPES.items():
            sections[name] = _section_from_dict(section_type, name, raw.get(name, {}))
        return cls(**sections)

    def replace_section(self, name: str, **updates) -> "RunConfig":
        """Functional update of one section (re-runs all validation)."""
        if name not in _SECTION_TYPES:
            raise ConfigurationError(f"unknown configuration section {name!r}")
        section = dataclasses.replace(getattr(self, name), **updates)
        return dataclasses.replace(self, **{name: section})


def _section_from_dict(section_type, name: str, values: dict):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigurationError(f"section {name!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(section_type)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    coerced = {}
    for key, value in values.items():
        coerced[key] = _coerce(fields[key].type, value, f"{name}.{key}")
    return section_type(**coerced)


def _coerce(annotation, value, path: str):
    ann = str(annotation)
    try:
        if "tuple" in ann:
            return tuple(value)
        if ann in ("int",):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("not an integer")
            return int(value)
        if ann in ("float",):
            return float(value)
        if ann in ("bool",):
            if not isinstance(value, bool):
                raise ValueError("expected true/false")
            return value
        if ann in ("str",):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad value for {path}: {value!r} ({exc})") from exc
    return value


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML run configuration; None yields the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"configuration file {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (values parsed as YAML scalars)."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigurationError(f"override path {dotted!r} must be section.key")
        section, key = parts
        if section not in raw:
            raise ConfigurationError(f"unknown configuration section {section!r}")
        raw[section][key] = yaml.safe_load(value)
    return RunConfig.from_dict(raw)
