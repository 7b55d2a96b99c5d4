"""Spectral and behavioural diagnostics for trained adapters and samplers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .adapters import LinearAdapter
from .diffusion import (
    CONCEPT_TOKEN,
    Condition,
    Denoiser,
    FinetuneResult,
    ToyDataset,
    TraceRow,
    context_token,
    format_condition,
    sample,
)
from .errors import DomainError, UndefinedRankError
from .linalg import derive_seed, effective_rank, frobenius_norm, random_gaussian, svd

LOG = logging.getLogger(__name__)

RANK_FRACTION = 0.95
MIN_EVAL_SAMPLES = 256

Sampler = Callable[[Condition, int, int], np.ndarray]


def max_effective_rank(r: int, fraction: float = RANK_FRACTION) -> int:
    """Largest effective rank any spectrum of length ``r`` can reach.

    The top-k values always hold at least k/r of the total, so a flat
    spectrum attains ⌈fraction·r⌉ and nothing exceeds it.
    """

    return max(1, math.ceil(fraction * r - 1e-9))


@dataclass(frozen=True)
class SpectrumReport:
    layer: str
    values: np.ndarray
    effective_rank: int
    r: int
    fraction: float = RANK_FRACTION
    a_values: np.ndarray | None = None

    @property
    def is_full_rank(self) -> bool:
        return self.effective_rank >= max_effective_rank(self.r, self.fraction)

    def rows(self) -> list[tuple[str, int, float]]:
        return [(self.layer, index, float(sigma)) for index, sigma in enumerate(self.values)]


def spectrum(
    adapter: LinearAdapter,
    layer: str = "",
    *,
    fraction: float = RANK_FRACTION,
    include_a: bool = False,
    strict: bool = True,
) -> SpectrumReport:
    """Singular spectrum of the trainable B and its effective rank.

    A zero B raises ``UndefinedRankError`` unless ``strict`` is false, in
    which case the rank is reported as 0.
    """

    values = svd(adapter.B).S
    try:
        rank = effective_rank(values, fraction)
    except UndefinedRankError:
        if strict:
            raise
        LOG.warning("Spektrum %s: B ist die Nullmatrix – effektiver Rang 0", layer or "?")
        rank = 0
    a_values = svd(adapter.A).S if include_a else None
    return SpectrumReport(layer, values, rank, adapter.r, fraction, a_values)


def denoiser_spectra(denoiser: Denoiser, *, fraction: float = RANK_FRACTION, strict: bool = False) -> list[SpectrumReport]:
    """Per-layer reports, one for every adapted hidden layer."""

    return [
        spectrum(adapter, name, fraction=fraction, strict=strict)
        for name, adapter in denoiser.adapters.items()
    ]


@dataclass
class OrthogonalityTrace:
    rows: list[TraceRow] = field(default_factory=list)

    @property
    def layers(self) -> list[str]:
        return sorted({row.layer for row in self.rows})

    def series(self, layer: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        selected = [row for row in self.rows if row.layer == layer]
        if not selected:
            raise DomainError(f"Keine Spur für Schicht {layer}")
        return (
            np.array([row.step for row in selected]),
            np.array([row.err_A for row in selected]),
            np.array([row.err_B for row in selected]),
        )

    def totals(self) -> dict[int, float]:
        """err_A + err_B summed over layers, per step."""

        sums: dict[int, float] = {}
        for row in self.rows:
            sums[row.step] = sums.get(row.step, 0.0) + row.err_A + row.err_B
        return sums

    def total(self, step: int) -> float:
        try:
            return self.totals()[step]
        except KeyError as exc:
            raise DomainError(f"Keine Spur für Schritt {step}") from exc

    @property
    def first_step(self) -> int:
        return min(row.step for row in self.rows)

    @property
    def last_step(self) -> int:
        return max(row.step for row in self.rows)

    def maximum(self) -> float:
        return max(max(row.err_A, row.err_B) for row in self.rows)

    def as_rows(self) -> list[tuple[int, str, float, float]]:
        return [(row.step, row.layer, row.err_A, row.err_B) for row in self.rows]


def orthogonality_trace(run: FinetuneResult) -> OrthogonalityTrace:
    if not run.trace:
        raise DomainError("Lauf ohne Orthogonalitätsspur (training.record_trace aktivieren)")
    return OrthogonalityTrace(list(run.trace))


@dataclass(frozen=True)
class EvalReport:
    concept_fidelity: float
    context_alignment: float
    per_context: dict[str, float]
    n_per_condition: int

    def rows(self) -> list[tuple[str, str, float]]:
        rows = [
            ("concept_fidelity", format_condition((CONCEPT_TOKEN, context_token(0))), self.concept_fidelity),
            ("context_alignment", "mean", self.context_alignment),
        ]
        rows.extend(("context_distance", condition, value) for condition, value in self.per_context.items())
        return rows


def covariance_distance(points: np.ndarray, target: np.ndarray) -> float:
    """Frobenius distance between the sample covariance of ``points`` and ``target``."""

    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise DomainError("Mindestens zwei Punkte für eine Kovarianz erforderlich")
    return frobenius_norm(np.cov(points, rowvar=False) - np.asarray(target, dtype=np.float64))


def evaluate(
    denoiser: Denoiser | None,
    dataset: ToyDataset,
    n_per_condition: int = MIN_EVAL_SAMPLES,
    seed: int = 0,
    *,
    sampler: Sampler | None = None,
) -> EvalReport:
    """Concept fidelity at (V*, c0) and context alignment over (V*, c_k), k ≥ 1."""

    if n_per_condition < 2:
        raise DomainError("n_per_condition muss mindestens 2 sein")
    if n_per_condition < MIN_EVAL_SAMPLES:
        LOG.warning("Auswertung mit nur %d Samples je Bedingung", n_per_condition)
    if sampler is None:
        if denoiser is None:
            raise DomainError("Denoiser oder Sampler erforderlich")
        sampler = lambda condition, n, s: sample(denoiser, condition, n, s)  # noqa: E731
    concept = sampler(dataset.concept_condition, n_per_condition, derive_seed(seed, 0))
    fidelity = covariance_distance(concept, dataset.concept_covariance)
    per_context: dict[str, float] = {}
    means = dataset.mode_means
    for k in range(1, dataset.n_modes):
        condition = (CONCEPT_TOKEN, context_token(k))
        points = sampler(condition, n_per_condition, derive_seed(seed, k))
        per_context[format_condition(condition)] = float(np.linalg.norm(points.mean(axis=0) - means[k]))
    alignment = float(np.mean(list(per_context.values()))) if per_context else 0.0
    LOG.info("Auswertung: Konzepttreue %.5f, Kontexttreue %.5f", fidelity, alignment)
    return EvalReport(fidelity, alignment, per_context, n_per_condition)


def mean_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Average several seeds' reports metric by metric."""

    if not reports:
        raise DomainError("Keine Berichte zum Mitteln")
    keys = reports[0].per_context.keys()
    return EvalReport(
        float(np.mean([report.concept_fidelity for report in reports])),
        float(np.mean([report.context_alignment for report in reports])),
        {key: float(np.mean([report.per_context[key] for report in reports])) for key in keys},
        reports[0].n_per_condition,
    )


@dataclass(frozen=True)
class WeightSpectrumComparison:
    """Spectra of a base weight and of a same-shape random N(0, 1/r) matrix."""

    w_values: np.ndarray
    r_values: np.ndarray

    def rows(self) -> list[tuple[str, int, float]]:
        rows = [("W", index, float(sigma)) for index, sigma in enumerate(self.w_values)]
        rows.extend(("R", index, float(sigma)) for index, sigma in enumerate(self.r_values))
        return rows

    def tail_ratio(self, count: int) -> float:
        """Mean of the ``count`` smallest values of R relative to those of W."""

        w_tail = float(np.mean(self.w_values[-count:]))
        r_tail = float(np.mean(self.r_values[-count:]))
        return math.inf if w_tail == 0.0 else r_tail / w_tail


def weight_spectrum_comparison(W: np.ndarray, r: int, seed: int) -> WeightSpectrumComparison:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DomainError("W muss zweidimensional sein")
    R = random_gaussian(W.shape[0], W.shape[1], 1.0 / r, seed)
    return WeightSpectrumComparison(svd(W).S, svd(R).S)
