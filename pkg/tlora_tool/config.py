"""Experiment configuration: strict JSON schema mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import pathlib
from dataclasses import dataclass, field
from typing import Any

from .adapters import AdapterKind, InitVariant
from .errors import ConfigError, DomainError

LOG = logging.getLogger(__name__)

DEFAULT_STEPS = {
    AdapterKind.PLAIN_LORA: 500,
    AdapterKind.VANILLA_TLORA: 500,
    AdapterKind.ORTHO_LORA: 800,
    AdapterKind.TLORA: 800,
    AdapterKind.ADALORA_SVD: 800,
}


def _positive_int(value: Any, name: str) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(name, f"muss eine ganze Zahl ≥ 1 sein (erhalten: {value!r})")


def _non_negative_int(value: Any, name: str) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ConfigError(name, f"muss eine ganze Zahl ≥ 0 sein (erhalten: {value!r})")


def _real(value: Any, name: str, *, low: float | None = None, high: float | None = None, strict: bool = True) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(name, f"muss eine endliche Zahl sein (erhalten: {value!r})")
    if low is not None and (value <= low if strict else value < low):
        raise ConfigError(name, f"muss {'größer als' if strict else 'mindestens'} {low} sein")
    if high is not None and value >= high:
        raise ConfigError(name, f"muss kleiner als {high} sein")


@dataclass
class DatasetConfig:
    n_modes: int = 8
    mode_std: float = 0.05
    concept_variance: list[float] = field(default_factory=lambda: [0.01, 0.0004])
    concept_size: int = 8
    embedding_dim: int = 8

    def validate(self) -> None:
        _positive_int(self.n_modes, "dataset.n_modes")
        _real(self.mode_std, "dataset.mode_std", low=0.0)
        if not isinstance(self.concept_variance, list) or len(self.concept_variance) != 2:
            raise ConfigError("dataset.concept_variance", "erwartet genau zwei Varianzen")
        for value in self.concept_variance:
            _real(value, "dataset.concept_variance", low=0.0)
        _positive_int(self.concept_size, "dataset.concept_size")
        if self.concept_size > 8:
            raise ConfigError("dataset.concept_size", "muss zwischen 1 und 8 liegen")
        _positive_int(self.embedding_dim, "dataset.embedding_dim")


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self) -> None:
        _positive_int(self.T, "schedule.T")
        _real(self.beta_start, "schedule.beta_start", low=0.0, high=1.0)
        _real(self.beta_end, "schedule.beta_end", low=0.0, high=1.0)
        if self.beta_end < self.beta_start:
            raise ConfigError("schedule.beta_end", "darf nicht kleiner als beta_start sein")


@dataclass
class DenoiserConfig:
    hidden: int = 64
    depth: int = 3
    time_dim: int = 16

    def validate(self) -> None:
        _positive_int(self.hidden, "denoiser.hidden")
        _positive_int(self.depth, "denoiser.depth")
        _positive_int(self.time_dim, "denoiser.time_dim")
        if self.time_dim % 2:
            raise ConfigError("denoiser.time_dim", "muss gerade sein")


@dataclass
class AdapterConfig:
    kind: str = "tlora"
    r: int = 32
    r_min: int | None = 16
    variant: str = "r_last"
    lambda_reg: float = 0.0
    adalora_std: float = 0.02

    @property
    def adapter_kind(self) -> AdapterKind:
        return AdapterKind.parse(self.kind)

    def validate(self, hidden: int | None = None) -> None:
        try:
            kind = AdapterKind.parse(self.kind)
        except DomainError as exc:
            raise ConfigError("adapter.kind", str(exc)) from exc
        _positive_int(self.r, "adapter.r")
        if hidden is not None and self.r > hidden:
            raise ConfigError("adapter.r", f"darf die Schichtbreite {hidden} nicht überschreiten")
        if self.r_min is not None:
            _positive_int(self.r_min, "adapter.r_min")
            if self.r_min > self.r:
                raise ConfigError("adapter.r_min", f"r_min={self.r_min} darf nicht größer als r={self.r} sein")
        elif kind.uses_schedule:
            raise ConfigError("adapter.r_min", f"Adapterart {kind.value} benötigt r_min")
        try:
            InitVariant.parse(self.variant)
        except DomainError as exc:
            raise ConfigError("adapter.variant", str(exc)) from exc
        _real(self.lambda_reg, "adapter.lambda_reg", low=0.0, strict=False)
        _real(self.adalora_std, "adapter.adalora_std", low=0.0)

    def effective_r_min(self) -> int | None:
        """``r_min`` for masked kinds; ``None`` otherwise."""

        return self.r_min if self.adapter_kind.uses_schedule else None

    @property
    def ignores_r_min(self) -> bool:
        return self.r_min is not None and not self.adapter_kind.uses_schedule


@dataclass
class SamplerConfig:
    mode: str = "uniform"
    lo: int = 0
    hi: int | None = None

    def validate(self, T: int | None = None) -> None:
        if self.mode not in ("uniform", "interval"):
            raise ConfigError("sampler.mode", f"unbekannt '{self.mode}' (erlaubt: uniform, interval)")
        _non_negative_int(self.lo, "sampler.lo")
        if self.hi is not None:
            _positive_int(self.hi, "sampler.hi")
            if self.hi <= self.lo:
                raise ConfigError("sampler.hi", "muss größer als lo sein")
            if T is not None and self.hi > T:
                raise ConfigError("sampler.hi", f"darf T={T} nicht überschreiten")
        elif T is not None and self.lo >= T:
            raise ConfigError("sampler.lo", f"muss kleiner als T={T} sein")


@dataclass
class TrainingConfig:
    pretrain_steps: int = 20000
    pretrain_batch: int = 32
    pretrain_lr: float = 1e-3
    finetune_steps: int | None = None
    finetune_batch: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    metrics_every: int = 25
    record_trace: bool = False

    def validate(self) -> None:
        _non_negative_int(self.pretrain_steps, "training.pretrain_steps")
        _positive_int(self.pretrain_batch, "training.pretrain_batch")
        _real(self.pretrain_lr, "training.pretrain_lr", low=0.0)
        if self.finetune_steps is not None:
            _non_negative_int(self.finetune_steps, "training.finetune_steps")
        _positive_int(self.finetune_batch, "training.finetune_batch")
        _real(self.lr, "training.lr", low=0.0)
        _real(self.beta1, "training.beta1", low=0.0, high=1.0, strict=False)
        _real(self.beta2, "training.beta2", low=0.0, high=1.0, strict=False)
        _real(self.weight_decay, "training.weight_decay", low=0.0, strict=False)
        _positive_int(self.metrics_every, "training.metrics_every")
        if not isinstance(self.record_trace, bool):
            raise ConfigError("training.record_trace", "muss true oder false sein")

    def steps_for(self, kind: AdapterKind) -> int:
        return DEFAULT_STEPS[kind] if self.finetune_steps is None else self.finetune_steps


@dataclass
class EvalConfig:
    n_per_condition: int = 256

    def validate(self) -> None:
        _positive_int(self.n_per_condition, "eval.n_per_condition")


@dataclass
class OutputConfig:
    """File names written next to the checkpoint given on the command line."""

    loss_trace: str = "loss.csv"
    metrics: str = "metrics.csv"
    trace: str = "trace.csv"

    def validate(self) -> None:
        for name in ("loss_trace", "metrics", "trace"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise ConfigError(f"output.{name}", "darf nicht leer sein")

    def resolve(self, name: str, checkpoint: pathlib.Path | str) -> pathlib.Path:
        return pathlib.Path(checkpoint).parent / getattr(self, name)


_SECTIONS = {
    "dataset": DatasetConfig,
    "schedule": ScheduleConfig,
    "denoiser": DenoiserConfig,
    "adapter": AdapterConfig,
    "sampler": SamplerConfig,
    "training": TrainingConfig,
    "eval": EvalConfig,
    "output": OutputConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        _non_negative_int(self.seed, "seed")
        self.dataset.validate()
        self.schedule.validate()
        self.denoiser.validate()
        self.adapter.validate(self.denoiser.hidden)
        self.sampler.validate(self.schedule.T)
        self.training.validate()
        self.eval.validate()
        self.output.validate()

    def to_dict(self) -> dict:
        self.validate()
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: Any) -> "ExperimentConfig":
        """Build and validate; unknown keys are rejected on every level."""

        if not isinstance(payload, dict):
            raise ConfigError("<root>", "Konfiguration muss ein JSON-Objekt sein")
        unknown = set(payload) - {"seed", *_SECTIONS}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unbekannter Schlüssel")
        sections: dict[str, Any] = {}
        for name, section_cls in _SECTIONS.items():
            block = payload.get(name, {})
            if not isinstance(block, dict):
                raise ConfigError(name, "muss ein JSON-Objekt sein")
            allowed = {item.name for item in dataclasses.fields(section_cls)}
            extra = set(block) - allowed
            if extra:
                raise ConfigError(f"{name}.{sorted(extra)[0]}", "unbekannter Schlüssel")
            sections[name] = section_cls(**block)
        config = cls(seed=payload.get("seed", 0), **sections)
        config.validate()
        return config

    def with_adapter(self, **changes: Any) -> "ExperimentConfig":
        config = dataclasses.replace(self, adapter=dataclasses.replace(self.adapter, **changes))
        config.validate()
        return config

    def with_sampler(self, **changes: Any) -> "ExperimentConfig":
        config = dataclasses.replace(self, sampler=dataclasses.replace(self.sampler, **changes))
        config.validate()
        return config


def load_config(path: pathlib.Path | str) -> ExperimentConfig:
    """Read a UTF-8 JSON config; ``json.JSONDecodeError`` propagates to the caller."""

    text = pathlib.Path(path).read_text(encoding="utf-8")
    config = ExperimentConfig.from_dict(json.loads(text))
    LOG.debug("Konfiguration geladen: %s", path)
    return config


class ConfigWriter:
    """Writes validated configurations as JSON."""

    def __init__(self, target_path: pathlib.Path | str) -> None:
        target = pathlib.Path(target_path)
        if target.is_dir():
            raise ValueError("Konfigurationsziel muss eine Datei sein")
        self.target_path = target

    def write(self, config: ExperimentConfig) -> pathlib.Path:
        payload = config.to_dict()
        self.target_path.parent.mkdir(parents=True, exist_ok=True)
        self.target_path.write_text(
            json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True), encoding="utf-8"
        )
        return self.target_path


def default_experiment_config(**adapter: Any) -> ExperimentConfig:
    """Toy defaults: T-LoRA with r=32 and r_min=16 on the 64-wide denoiser."""

    config = ExperimentConfig()
    if adapter:
        config = config.with_adapter(**adapter)
    config.validate()
    return config
