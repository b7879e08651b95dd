"""Experiment configuration stored as versioned TOML."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import tomli
import tomli_w

from .networks import PRESETS, UNetSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleBlock:
    T: int = 1000
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ReferenceBlock:
    name: str = "residual_cnn"
    checkpoint: str = ""
    width: int = 48
    blocks: int = 6
    epochs: int = 100
    iterations: int = 1500
    batch_size: int = 16
    learning_rate: float = 1e-3


@dataclass
class StageBlock:
    image_size: int = 0  # 0: derived from data.size (quarter for cnp_small)
    batch_size: int = 16
    learning_rate: float = 1e-5
    iterations: int = 1000
    lam: float = 1.0
    early_stop: bool = False


@dataclass
class TrainingBlock:
    cnp_small: StageBlock = field(default_factory=lambda: StageBlock(batch_size=64, iterations=2000))
    wa_frozen: StageBlock = field(default_factory=StageBlock)
    joint: StageBlock = field(default_factory=StageBlock)
    clip_denoised: bool = True
    output_dir: str = "runs/default"
    log_every: int = 100


@dataclass
class SamplerBlock:
    mode: str = "ddim"
    ddim_steps: int = 50
    eta: float = 0.3
    fusion_enabled: bool = True
    clip_denoised: bool = True
    noise_coeff: str = "sqrt_beta_tilde"


@dataclass
class DataBlock:
    source: str = "synthetic"  # "synthetic" | "directory" | "manifest"
    path: str = ""
    bands: int = 4
    size: int = 32
    n_train: int = 200
    n_test: int = 40
    coverage: float = 0.5
    thickness_min: float = 0.5
    thickness_max: float = 0.9
    split_ratio: float = 0.8
    resolution: float = 0.5


@dataclass
class MetricsBlock:
    lpips_backend: str = ""
    batch_size: int = 64


@dataclass
class ExperimentConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    schedule: ScheduleBlock = field(default_factory=ScheduleBlock)
    cnp: dict = field(default_factory=lambda: PRESETS["cnp_full"].to_dict())
    wa: dict = field(default_factory=lambda: PRESETS["wa_full"].to_dict())
    reference: ReferenceBlock = field(default_factory=ReferenceBlock)
    training: TrainingBlock = field(default_factory=TrainingBlock)
    sampler: SamplerBlock = field(default_factory=SamplerBlock)
    data: DataBlock = field(default_factory=DataBlock)
    metrics: MetricsBlock = field(default_factory=MetricsBlock)

    @property
    def cnp_spec(self) -> UNetSpec:
        return UNetSpec.from_dict(self.cnp)

    @property
    def wa_spec(self) -> UNetSpec:
        return UNetSpec.from_dict(self.wa)

    def validate(self) -> "ExperimentConfig":
        if self.version > SCHEMA_VERSION:
            raise ConfigError(f"config schema version {self.version} is newer than supported {SCHEMA_VERSION}")
        try:
            cnp, wa = self.cnp_spec, self.wa_spec
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid network spec: {exc}") from exc
        size = self.data.size
        small = self.stage_size("cnp_small")
        for name, spec, s in (("cnp", cnp, small), ("cnp", cnp, size), ("wa", wa, size)):
            if s % spec.size_multiple:
                raise ConfigError(f"{name} needs image sizes divisible by {spec.size_multiple}, got {s}")
        if not 0.0 <= self.sampler.eta < 1.0:
            raise ConfigError("sampler.eta must lie in [0, 1)")
        if self.sampler.ddim_steps > self.schedule.T:
            raise ConfigError("sampler.ddim_steps exceeds schedule.T")
        if self.data.bands < 1:
            raise ConfigError("data.bands must be >= 1")
        return self

    def stage_size(self, stage: str) -> int:
        block: StageBlock = getattr(self.training, stage)
        if block.image_size:
            return block.image_size
        return max(1, self.data.size // 4) if stage == "cnp_small" else self.data.size

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(tomli.loads(text)).validate()
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.loads(path.read_text())


def _build(cls, d: dict, prefix: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(prefix + k for k in unknown)}")
    kwargs: dict[str, Any] = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if hasattr(current, "__dataclass_fields__") and isinstance(value, dict):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        elif isinstance(current, dict) and isinstance(value, dict):
            kwargs[name] = {**current, **value}
        else:
            kwargs[name] = value
    return cls(**kwargs)


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Optional[Any]]) -> ExperimentConfig:
    """Set dotted keys (``"sampler.eta"``) on a copy of ``cfg``; ``None`` values are skipped."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        node = d
        *path, leaf = key.split(".")
        for part in path:
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[leaf] = value
    return ExperimentConfig.from_dict(d).validate()


def tiny_config(output_dir: str = "runs/tiny", seed: int = 0) -> ExperimentConfig:
    """Desk-scale preset: 32x32 4-band synthetic data and the small network specs."""
    cfg = ExperimentConfig(
        seed=seed,
        cnp=PRESETS["cnp_tiny"].to_dict(),
        wa=PRESETS["wa_tiny"].to_dict(),
    )
    cfg.training.output_dir = output_dir
    cfg.training.cnp_small = StageBlock(batch_size=32, learning_rate=5e-4, iterations=2000)
    cfg.training.wa_frozen = StageBlock(batch_size=8, learning_rate=5e-4, iterations=1000)
    cfg.training.joint = StageBlock(batch_size=8, learning_rate=2e-4, iterations=1000)
    return cfg.validate()
