"""Toy conditional DDPM on 2-D points.

Public arrays use one point per row (``(n, 2)``); the network works on
columns internally. Timesteps run from 1 (almost clean) to ``T`` (almost
pure noise).
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .adapters import LinearAdapter, build_adapter
from .config import (
    AdapterConfig,
    DatasetConfig,
    DenoiserConfig,
    ExperimentConfig,
    SamplerConfig,
    ScheduleConfig,
    TrainingConfig,
)
from .diagnostics import ProgressLogger, check_finite, guarded_action
from .errors import DomainError
from .gradnet import (
    AdamState,
    AdaptedLinear,
    Linear,
    Node,
    Param,
    adam_step,
    concat_rows,
    constant,
    evaluate_loss,
    forward_backward,
    scalar_sum,
    silu,
)
from .linalg import derive_seed, make_rng, matrix_effective_rank, split_rngs

LOG = logging.getLogger(__name__)

CONCEPT_TOKEN = "V*"
Condition = tuple[str, ...]

# sub-seed labels
_SEED_LAYERS = 1
_SEED_EMBEDDING = 2
_SEED_CONCEPT = 3
_SEED_PRETRAIN = 4
_SEED_FINETUNE = 5
_SEED_ADAPTER = 6
_SEED_HELDOUT = 7


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass
class NoiseSchedule:
    """Linear β schedule; ``alpha_bar[t]`` for t in 0..T with ``alpha_bar[0] = 1``."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    beta: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.T < 1:
            raise DomainError("T muss mindestens 1 sein")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise DomainError("β muss in (0, 1) liegen und darf nicht fallen")
        self.beta = _readonly(np.linspace(self.beta_start, self.beta_end, self.T))
        self.alpha_bar = _readonly(np.concatenate([[1.0], np.cumprod(1.0 - self.beta)]))

    @classmethod
    def from_config(cls, config: ScheduleConfig) -> "NoiseSchedule":
        return cls(T=config.T, beta_start=config.beta_start, beta_end=config.beta_end)

    def _check(self, t: int | np.ndarray) -> np.ndarray:
        steps = np.asarray(t, dtype=np.int64)
        if steps.size and (steps.min() < 1 or steps.max() > self.T):
            raise DomainError(f"Zeitschritt muss in 1..{self.T} liegen (erhalten: {t})")
        return steps

    def beta_at(self, t: int) -> float:
        return float(self.beta[int(self._check(t)) - 1])

    def posterior_variance(self, t: int) -> float:
        """β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)."""

        step = int(self._check(t))
        return self.beta_at(step) * (1.0 - self.alpha_bar[step - 1]) / (1.0 - self.alpha_bar[step])

    def describe(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def forward_diffuse(z0: np.ndarray, t: int | np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """√ᾱ_t · z0 + √(1 − ᾱ_t) · eps for one point or a batch of rows."""

    steps = sched._check(t)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise DomainError(f"z0 und eps müssen dieselbe Form haben ({z0.shape} / {eps.shape})")
    alpha_bar = sched.alpha_bar[steps]
    if alpha_bar.ndim == 1 and z0.ndim == 2:
        alpha_bar = alpha_bar[:, None]
    return np.sqrt(alpha_bar) * z0 + np.sqrt(1.0 - alpha_bar) * eps


def sinusoidal_embedding(t: np.ndarray | int, T: int, dim: int = 16) -> np.ndarray:
    """(batch, dim) features sin/cos(f · t/T) with f spaced geometrically in [1, 1000]."""

    if dim < 2 or dim % 2:
        raise DomainError("Dimension der Zeiteinbettung muss gerade und ≥ 2 sein")
    tau = np.atleast_1d(np.asarray(t, dtype=np.float64)) / float(T)
    frequencies = np.geomspace(1.0, 1000.0, dim // 2)
    angles = tau[:, None] * frequencies[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def context_token(index: int) -> str:
    return f"c{index}"


def parse_condition(value: str | Sequence[str]) -> Condition:
    """``"V*+c0"`` or ``("V*", "c0")`` → ``("V*", "c0")``."""

    tokens = value.split("+") if isinstance(value, str) else list(value)
    tokens = [str(token).strip() for token in tokens if str(token).strip()]
    if not tokens:
        raise DomainError("Bedingung braucht mindestens ein Token")
    return tuple(tokens)


def format_condition(condition: Condition) -> str:
    return "+".join(condition)


class ConditionEmbedding:
    """Frozen token table; a condition embeds as the sum of its token rows."""

    def __init__(self, tokens: Sequence[str], table: np.ndarray) -> None:
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != len(tokens):
            raise DomainError("Einbettungstabelle passt nicht zur Tokenliste")
        if len(set(tokens)) != len(tokens):
            raise DomainError("Tokens müssen eindeutig sein")
        self.tokens = tuple(tokens)
        self.table = _readonly(table)
        self._index = {token: row for row, token in enumerate(self.tokens)}

    @classmethod
    def create(cls, n_contexts: int, dim: int, seed: int) -> "ConditionEmbedding":
        tokens = [context_token(k) for k in range(n_contexts)] + [CONCEPT_TOKEN]
        return cls(tokens, make_rng(seed).standard_normal((len(tokens), dim)))

    @property
    def dim(self) -> int:
        return int(self.table.shape[1])

    def embed(self, conditions: Iterable[Condition]) -> np.ndarray:
        rows = []
        for condition in conditions:
            try:
                rows.append(self.table[[self._index[token] for token in condition]].sum(axis=0))
            except KeyError as exc:
                raise DomainError(f"Unbekanntes Token {exc.args[0]!r}") from exc
        if not rows:
            return np.zeros((0, self.dim))
        return np.vstack(rows)


@dataclass
class ToyDataset:
    """Gaussian modes on the unit circle plus a small elongated concept set at mode 0."""

    n_modes: int = 8
    mode_std: float = 0.05
    concept_variance: tuple[float, float] = (0.01, 0.0004)
    concept_size: int = 8
    seed: int = 0
    concept_points: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.n_modes < 1:
            raise DomainError("Mindestens ein Modus erforderlich")
        if not self.mode_std > 0:
            raise DomainError("mode_std muss größer als 0 sein")
        if not 1 <= self.concept_size <= 8:
            raise DomainError("concept_size muss zwischen 1 und 8 liegen")
        self.concept_variance = tuple(float(v) for v in self.concept_variance)
        if len(self.concept_variance) != 2 or min(self.concept_variance) <= 0:
            raise DomainError("concept_variance braucht zwei positive Werte")
        rng = make_rng(derive_seed(self.seed, _SEED_CONCEPT))
        offsets = rng.standard_normal((self.concept_size, 2))
        if self.concept_size >= 3:
            # the set's own mean and population covariance are exactly the target moments
            offsets = offsets - offsets.mean(axis=0)
            factor = np.linalg.cholesky(offsets.T @ offsets / self.concept_size)
            offsets = np.linalg.solve(factor, offsets.T).T
        offsets = offsets * np.sqrt(self.concept_variance)
        self.concept_points = _readonly(self.concept_mean + offsets)

    @classmethod
    def from_config(cls, config: DatasetConfig, seed: int) -> "ToyDataset":
        return cls(
            n_modes=config.n_modes,
            mode_std=config.mode_std,
            concept_variance=tuple(config.concept_variance),
            concept_size=config.concept_size,
            seed=seed,
        )

    @property
    def mode_means(self) -> np.ndarray:
        angles = 2.0 * np.pi * np.arange(self.n_modes) / self.n_modes
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)

    @property
    def concept_mean(self) -> np.ndarray:
        return self.mode_means[0]

    @property
    def concept_covariance(self) -> np.ndarray:
        return np.diag(self.concept_variance)

    @property
    def concept_condition(self) -> Condition:
        return (CONCEPT_TOKEN, context_token(0))

    def sample_prior(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        modes = rng.integers(0, self.n_modes, size=n)
        points = self.mode_means[modes] + rng.standard_normal((n, 2)) * self.mode_std
        return points, modes

    def sample_concept(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.concept_points[rng.integers(0, self.concept_size, size=n)]


@dataclass(frozen=True)
class TimestepSampler:
    """Uniform over 1..T or uniform over an interval [lo, hi] (lower bound clamped to 1)."""

    T: int
    lo: int = 0
    hi: int | None = None
    mode: str = "uniform"

    def __post_init__(self) -> None:
        hi = self.T if self.hi is None else self.hi
        object.__setattr__(self, "hi", hi)
        if self.mode not in ("uniform", "interval"):
            raise DomainError(f"Unbekannter Sampler-Modus '{self.mode}'")
        if not 0 <= self.lo < hi <= self.T:
            raise DomainError(f"Intervall muss 0 ≤ lo < hi ≤ T erfüllen (lo={self.lo}, hi={hi}, T={self.T})")
        if self.mode == "uniform" and (self.lo, hi) != (0, self.T):
            raise DomainError("Uniform-Sampler deckt immer 0..T ab")

    @classmethod
    def uniform(cls, T: int) -> "TimestepSampler":
        return cls(T=T)

    @classmethod
    def interval(cls, lo: int, hi: int, T: int) -> "TimestepSampler":
        return cls(T=T, lo=lo, hi=hi, mode="interval")

    @classmethod
    def from_config(cls, config: SamplerConfig, T: int) -> "TimestepSampler":
        if config.mode == "uniform":
            return cls.uniform(T)
        return cls.interval(config.lo, T if config.hi is None else config.hi, T)

    @property
    def low(self) -> int:
        return max(self.lo, 1)

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.integers(self.low, self.hi, size=size, endpoint=True)

    def describe(self) -> str:
        return "uniform" if self.mode == "uniform" else f"interval({self.lo},{self.hi})"


def _digest(arrays: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name, array in sorted(arrays.items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return digest.hexdigest()


@dataclass
class DenoiserInput:
    """Batch of rows: noisy points, timesteps, condition vectors and mask timesteps."""

    z: np.ndarray
    t: np.ndarray
    cond: np.ndarray
    mask_t: np.ndarray | None = None


HIDDEN_PREFIX = "h"


class Denoiser:
    """ε-prediction MLP: raw input projection, adaptable hidden layers, raw output."""

    def __init__(
        self,
        input_layer: Linear,
        hidden: list[Linear | AdaptedLinear],
        output_layer: Linear,
        embedding: ConditionEmbedding,
        schedule: NoiseSchedule,
        time_dim: int = 16,
    ) -> None:
        if not hidden:
            raise DomainError("Mindestens eine verborgene Schicht erforderlich")
        self.input_layer = input_layer
        self.hidden = hidden
        self.output_layer = output_layer
        self.embedding = embedding
        self.schedule = schedule
        self.time_dim = time_dim
        expected = 2 + time_dim + embedding.dim
        if input_layer.shape[1] != expected:
            raise DomainError(f"Eingabeschicht erwartet {expected} Merkmale, hat {input_layer.shape[1]}")

    @classmethod
    def create(
        cls,
        schedule: NoiseSchedule,
        embedding: ConditionEmbedding,
        seed: int,
        *,
        hidden: int = 64,
        depth: int = 3,
        time_dim: int = 16,
    ) -> "Denoiser":
        def layer(name: str, index: int, rows: int, cols: int) -> Linear:
            rng = make_rng(derive_seed(seed, _SEED_LAYERS, index))
            return Linear(name, rng.standard_normal((rows, cols)) / math.sqrt(cols), np.zeros(rows))

        fan_in = 2 + time_dim + embedding.dim
        hidden_layers = [layer(f"{HIDDEN_PREFIX}{i}", i + 1, hidden, hidden) for i in range(depth)]
        return cls(
            layer("inp", 0, hidden, fan_in),
            hidden_layers,
            layer("out", depth + 1, 2, hidden),
            embedding,
            schedule,
            time_dim,
        )

    @classmethod
    def from_config(cls, config: ExperimentConfig, seed: int) -> "Denoiser":
        schedule = NoiseSchedule.from_config(config.schedule)
        embedding = ConditionEmbedding.create(
            config.dataset.n_modes, config.dataset.embedding_dim, derive_seed(seed, _SEED_EMBEDDING)
        )
        denoiser_cfg: DenoiserConfig = config.denoiser
        return cls.create(
            schedule,
            embedding,
            seed,
            hidden=denoiser_cfg.hidden,
            depth=denoiser_cfg.depth,
            time_dim=denoiser_cfg.time_dim,
        )

    @property
    def layers(self) -> list[Linear | AdaptedLinear]:
        return [self.input_layer, *self.hidden, self.output_layer]

    @property
    def adapters(self) -> dict[str, LinearAdapter]:
        return {layer.name: layer.adapter for layer in self.hidden if isinstance(layer, AdaptedLinear)}

    @property
    def has_adapters(self) -> bool:
        return bool(self.adapters)

    def parameters(self) -> list[Param]:
        return [param for layer in self.layers for param in layer.parameters()]

    def trainable_parameters(self) -> list[Param]:
        return [param for param in self.parameters() if param.trainable]

    def __call__(self, inputs: DenoiserInput) -> Node:
        features = concat_rows(
            [
                constant(np.asarray(inputs.z, dtype=np.float64).T),
                constant(sinusoidal_embedding(inputs.t, self.schedule.T, self.time_dim).T),
                constant(np.asarray(inputs.cond, dtype=np.float64).T),
            ]
        )
        mask_steps = inputs.t if inputs.mask_t is None else inputs.mask_t
        h = silu(self.input_layer(features))
        for layer in self.hidden:
            h = silu(layer(h, mask_steps))
        return self.output_layer(h)

    def predict(self, z: np.ndarray, t: np.ndarray, cond: np.ndarray, mask_t: np.ndarray | None = None) -> np.ndarray:
        """Predicted noise, one row per input point."""

        return self(DenoiserInput(z, t, cond, mask_t)).value.T

    def attach_adapters(self, config: AdapterConfig, seed: int) -> "Denoiser":
        """New denoiser with every hidden layer wrapped; all base weights frozen."""

        if self.has_adapters:
            raise DomainError("Denoiser trägt bereits Adapter")
        config.validate(self.hidden[0].shape[0])
        r_min = config.effective_r_min()
        hidden: list[Linear | AdaptedLinear] = []
        for index, layer in enumerate(self.hidden):
            adapter = build_adapter(
                layer.weight.value,
                config.adapter_kind,
                config.r,
                derive_seed(seed, _SEED_ADAPTER, index),
                r_min=r_min,
                T=self.schedule.T,
                variant=config.variant,
                adalora_std=config.adalora_std,
            )
            hidden.append(AdaptedLinear(layer.name, adapter, layer.bias.value))
        LOG.info("Adapter %s (r=%d) an %d Schichten angehängt", config.kind, config.r, len(hidden))
        return Denoiser(
            _frozen_copy(self.input_layer),
            hidden,
            _frozen_copy(self.output_layer),
            self.embedding,
            self.schedule,
            self.time_dim,
        )

    def base_arrays(self) -> dict[str, np.ndarray]:
        """Everything fine-tuning must leave untouched."""

        arrays: dict[str, np.ndarray] = {"embedding": self.embedding.table, "alpha_bar": self.schedule.alpha_bar}
        for layer in self.layers:
            if isinstance(layer, AdaptedLinear):
                arrays[f"{layer.name}.W"] = layer.adapter.W
            else:
                arrays[f"{layer.name}.W"] = layer.weight.value
            arrays[f"{layer.name}.b"] = layer.bias.value
        return arrays

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        """Base arrays plus the frozen A0, B0 and S0 copies of every adapter."""

        arrays = self.base_arrays()
        for name, adapter in self.adapters.items():
            for key in ("A0", "B0", "S0"):
                value = getattr(adapter, key)
                if value is not None:
                    arrays[f"{name}.{key}"] = value
        return arrays

    def base_digest(self) -> str:
        return _digest(self.base_arrays())

    def frozen_digest(self) -> str:
        return _digest(self.frozen_arrays())

    def tensors(self) -> dict[str, np.ndarray]:
        tensors: dict[str, np.ndarray] = {"embedding": self.embedding.table}
        for layer in self.layers:
            if isinstance(layer, AdaptedLinear):
                tensors.update(layer.adapter.tensors(layer.name))
            else:
                tensors[f"{layer.name}.W"] = layer.weight.value
            tensors[f"{layer.name}.b"] = layer.bias.value.reshape(-1, 1)
        return tensors

    def describe(self) -> dict:
        return {
            "hidden": int(self.hidden[0].shape[0]),
            "depth": len(self.hidden),
            "time_dim": self.time_dim,
            "tokens": list(self.embedding.tokens),
            "schedule": self.schedule.describe(),
            "adapters": {name: adapter.describe() for name, adapter in self.adapters.items()},
        }

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], description: dict) -> "Denoiser":
        try:
            schedule = NoiseSchedule(**description["schedule"])
            embedding = ConditionEmbedding(description["tokens"], tensors["embedding"])
            adapters = description.get("adapters", {})
            frozen = bool(adapters)

            def raw(name: str) -> Linear:
                layer = Linear(name, tensors[f"{name}.W"], tensors[f"{name}.b"].reshape(-1))
                if frozen:
                    layer.freeze()
                return layer

            hidden: list[Linear | AdaptedLinear] = []
            for index in range(int(description["depth"])):
                name = f"{HIDDEN_PREFIX}{index}"
                if name in adapters:
                    adapter = LinearAdapter.from_tensors(name, tensors, adapters[name])
                    hidden.append(AdaptedLinear(name, adapter, tensors[f"{name}.b"].reshape(-1)))
                else:
                    hidden.append(raw(name))
            return cls(raw("inp"), hidden, raw("out"), embedding, schedule, int(description["time_dim"]))
        except KeyError as exc:
            raise DomainError(f"Denoiser-Beschreibung unvollständig: {exc.args[0]}") from exc


def _frozen_copy(layer: Linear) -> Linear:
    return Linear(layer.name, layer.weight.value, layer.bias.value, trainable=False)


def _training_batch(
    denoiser: Denoiser,
    points: np.ndarray,
    conditions: Sequence[Condition],
    timesteps: np.ndarray,
    rng: np.random.Generator,
) -> tuple[DenoiserInput, np.ndarray]:
    eps = rng.standard_normal(points.shape)
    z_t = forward_diffuse(points, timesteps, eps, denoiser.schedule)
    return DenoiserInput(z_t, timesteps, denoiser.embedding.embed(conditions)), eps.T


@dataclass
class PretrainResult:
    denoiser: Denoiser
    losses: list[float]


@guarded_action("Vortraining", LOG)
def pretrain(
    dataset: ToyDataset,
    denoiser: Denoiser,
    steps: int,
    seed: int,
    *,
    batch_size: int = 32,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
) -> PretrainResult:
    """Train the raw denoiser on (prior point, context token) pairs in place."""

    if denoiser.has_adapters:
        raise DomainError("Vortraining erwartet einen Denoiser ohne Adapter")
    if steps < 0 or batch_size < 1:
        raise DomainError("steps ≥ 0 und batch_size ≥ 1 erforderlich")
    rng = make_rng(derive_seed(seed, _SEED_PRETRAIN))
    sampler = TimestepSampler.uniform(denoiser.schedule.T)
    state = AdamState(lr=lr, weight_decay=weight_decay)
    params = denoiser.trainable_parameters()
    progress = ProgressLogger("Vortraining", steps, LOG)
    losses: list[float] = []
    for step in range(1, steps + 1):
        points, modes = dataset.sample_prior(batch_size, rng)
        timesteps = sampler.draw(rng, batch_size)
        conditions = [(context_token(int(k)),) for k in modes]
        inputs, target = _training_batch(denoiser, points, conditions, timesteps, rng)
        loss = forward_backward(denoiser, inputs, target)
        adam_step(state, params)
        losses.append(loss)
        progress.step(step, loss)
    return PretrainResult(denoiser, losses)


@dataclass(frozen=True)
class MetricsRow:
    step: int
    loss: float
    err_A: float
    err_B: float
    eff_rank_B: int
    rank_t: int


@dataclass(frozen=True)
class TraceRow:
    step: int
    layer: str
    err_A: float
    err_B: float


@dataclass
class FinetuneResult:
    denoiser: Denoiser
    losses: list[float]
    metrics: list[MetricsRow]
    trace: list[TraceRow]
    sampler: TimestepSampler
    config: AdapterConfig


def _trace_rows(step: int, adapters: dict[str, LinearAdapter]) -> list[TraceRow]:
    rows = []
    for name, adapter in adapters.items():
        err_a, err_b = adapter.orthogonality()
        rows.append(TraceRow(step, name, err_a, err_b))
    return rows


def _metrics_row(step: int, loss: float, adapters: dict[str, LinearAdapter], t: int) -> MetricsRow:
    errors = [adapter.orthogonality() for adapter in adapters.values()]
    ranks = [matrix_effective_rank(adapter.B) for adapter in adapters.values()]
    first = next(iter(adapters.values()))
    return MetricsRow(
        step=step,
        loss=loss,
        err_A=float(sum(err for err, _ in errors)),
        err_B=float(sum(err for _, err in errors)),
        eff_rank_B=int(min(ranks)),
        rank_t=first.rank_at(t),
    )


def _penalty(denoiser: Denoiser, lambda_reg: float):
    if lambda_reg == 0.0:
        return None

    def extra() -> Node:
        total: Node | None = None
        for layer in denoiser.hidden:
            term = layer.penalty(lambda_reg)
            total = term if total is None else scalar_sum(total, term)
        return total

    return extra


@guarded_action("Feinabstimmung", LOG)
def finetune(
    denoiser: Denoiser,
    dataset: ToyDataset,
    adapter_config: AdapterConfig,
    sampler: TimestepSampler,
    steps: int,
    seed: int,
    *,
    training: TrainingConfig | None = None,
    record_trace: bool | None = None,
) -> FinetuneResult:
    """Train adapter factors only on (concept point, V* + c0) pairs.

    The input denoiser is not modified; the returned one carries the adapters.
    """

    training = training or TrainingConfig()
    if steps < 0:
        raise DomainError("steps darf nicht negativ sein")
    if sampler.T != denoiser.schedule.T:
        raise DomainError(f"Sampler-T={sampler.T} passt nicht zu Schedule-T={denoiser.schedule.T}")
    record_trace = training.record_trace if record_trace is None else record_trace
    tuned = denoiser.attach_adapters(adapter_config, seed)
    adapters = tuned.adapters
    params = tuned.trainable_parameters()
    state = AdamState(
        lr=training.lr, beta1=training.beta1, beta2=training.beta2, weight_decay=training.weight_decay
    )
    extra = _penalty(tuned, float(adapter_config.lambda_reg))
    rng = make_rng(derive_seed(seed, _SEED_FINETUNE))
    batch = training.finetune_batch
    conditions = [dataset.concept_condition] * batch
    progress = ProgressLogger("Feinabstimmung", steps, LOG)
    losses: list[float] = []
    metrics: list[MetricsRow] = []
    trace: list[TraceRow] = _trace_rows(0, adapters) if record_trace else []
    LOG.info("Feinabstimmung: %s, Sampler %s, %d Schritte", adapter_config.kind, sampler.describe(), steps)
    for step in range(1, steps + 1):
        points = dataset.sample_concept(batch, rng)
        timesteps = sampler.draw(rng, batch)
        inputs, target = _training_batch(tuned, points, conditions, timesteps, rng)
        loss = forward_backward(tuned, inputs, target, extra_loss=extra)
        adam_step(state, params)
        for param in params:
            check_finite(param.value, param.name)
        losses.append(loss)
        if record_trace:
            trace.extend(_trace_rows(step, adapters))
        if step % training.metrics_every == 0 or step == steps:
            metrics.append(_metrics_row(step, loss, adapters, int(timesteps[0])))
        progress.step(step, loss)
    return FinetuneResult(tuned, losses, metrics, trace, sampler, adapter_config)


def sample(
    denoiser: Denoiser,
    condition: str | Sequence[str],
    n: int,
    seed: int,
    t_override: int | None = None,
) -> np.ndarray:
    """Ancestral DDPM sampling from T down to 1; returns ``(n, 2)``.

    Each chain draws its whole noise block (start point and per-step noise)
    from its own child stream. ``t_override`` fixes only the timestep fed to
    the adapter masks.
    """

    if n < 0:
        raise DomainError("n darf nicht negativ sein")
    schedule = denoiser.schedule
    T = schedule.T
    if t_override is not None and not 0 <= t_override <= T:
        raise DomainError(f"t_override muss in 0..{T} liegen")
    condition = parse_condition(condition)
    cond = denoiser.embedding.embed([condition] * n)
    if n == 0:
        return np.zeros((0, 2))
    noise = np.stack([rng.standard_normal((T + 1, 2)) for rng in split_rngs(seed, n)])
    z = noise[:, T, :].copy()
    for t in range(T, 0, -1):
        steps = np.full(n, t, dtype=np.int64)
        mask_steps = None if t_override is None else np.full(n, t_override, dtype=np.int64)
        eps_hat = denoiser.predict(z, steps, cond, mask_steps)
        beta = schedule.beta_at(t)
        z = (z - beta / math.sqrt(1.0 - schedule.alpha_bar[t]) * eps_hat) / math.sqrt(1.0 - beta)
        if t > 1:
            z = z + math.sqrt(schedule.posterior_variance(t)) * noise[:, t - 1, :]
    check_finite(z, "Samples")
    return z


def heldout_loss(denoiser: Denoiser, dataset: ToyDataset, seed: int, *, batch_size: int = 64) -> float:
    """Loss on a fixed held-out batch of prior points; no gradients are kept."""

    rng = make_rng(derive_seed(seed, _SEED_HELDOUT))
    points, modes = dataset.sample_prior(batch_size, rng)
    timesteps = TimestepSampler.uniform(denoiser.schedule.T).draw(rng, batch_size)
    conditions = [(context_token(int(k)),) for k in modes]
    inputs, target = _training_batch(denoiser, points, conditions, timesteps, rng)
    return evaluate_loss(denoiser, inputs, target)
