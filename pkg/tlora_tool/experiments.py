"""Reproducible experiment recipes with pass/fail boards.

Every recipe fine-tunes copies of one pretrained denoiser and records its
criteria on a :class:`VerdictBoard`. A failed criterion is a result, not an
error.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from .adapters import ALL_VARIANTS, AdapterKind
from .analysis import (
    EvalReport,
    OrthogonalityTrace,
    SpectrumReport,
    denoiser_spectra,
    evaluate,
    max_effective_rank,
    mean_reports,
    orthogonality_trace,
)
from .config import ExperimentConfig
from .diffusion import Denoiser, FinetuneResult, TimestepSampler, ToyDataset, finetune

LOG = logging.getLogger(__name__)

PASSED = "bestanden"
FAILED = "nicht bestanden"
MEASURED = "gemessen"
_STATUSES = {PASSED, FAILED, MEASURED}

ORTHO_INIT_TOLERANCE = 1e-12
ORTHO_DRIFT_TOLERANCE = 1e-6
COLLAPSE_FRACTION = 0.8
ADALORA_RETENTION = 0.1
FIDELITY_SLACK = 0.25


@dataclass
class Verdict:
    experiment: str
    criterion: str
    status: str
    detail: str = ""

    def __post_init__(self) -> None:
        if not self.experiment:
            raise ValueError("Verdikt benötigt ein Experiment")
        if not self.criterion:
            raise ValueError("Verdikt benötigt ein Kriterium")
        if self.status not in _STATUSES:
            raise ValueError(f"Unbekannter Status '{self.status}'")


class VerdictBoard:
    """Collects criteria and computes a pass rate."""

    def __init__(self, experiment: str) -> None:
        self.experiment = experiment
        self.verdicts: list[Verdict] = []

    def check(self, criterion: str, passed: bool, detail: str = "") -> Verdict:
        verdict = Verdict(self.experiment, criterion, PASSED if passed else FAILED, detail)
        self.verdicts.append(verdict)
        LOG.info("%s / %s: %s %s", self.experiment, criterion, verdict.status, detail)
        return verdict

    def measure(self, criterion: str, detail: str) -> Verdict:
        verdict = Verdict(self.experiment, criterion, MEASURED, detail)
        self.verdicts.append(verdict)
        return verdict

    @property
    def passed(self) -> bool:
        return all(verdict.status != FAILED for verdict in self.verdicts)

    def progress(self) -> tuple[int, str]:
        checked = [v for v in self.verdicts if v.status != MEASURED]
        if not checked:
            return 100, "Keine Kriterien geprüft"
        good = sum(1 for v in checked if v.status == PASSED)
        percent = int(good / len(checked) * 100)
        return percent, f"{self.experiment}: {percent}% – {good}/{len(checked)} Kriterien bestanden"

    def status_lines(self) -> list[str]:
        lines = []
        for verdict in self.verdicts:
            detail = f" – {verdict.detail}" if verdict.detail else ""
            lines.append(f"{verdict.criterion}: {verdict.status}{detail}")
        return lines

    def as_dict(self) -> dict[str, str]:
        return {verdict.criterion: verdict.status for verdict in self.verdicts}

    def rows(self) -> list[tuple[str, str, str, str]]:
        return [(v.experiment, v.criterion, v.status, v.detail) for v in self.verdicts]


@dataclass
class ExperimentOutcome:
    board: VerdictBoard
    spectra: dict[str, list[SpectrumReport]] = field(default_factory=dict)
    traces: dict[str, OrthogonalityTrace] = field(default_factory=dict)
    evals: dict[str, EvalReport] = field(default_factory=dict)


@dataclass
class ExperimentContext:
    base: Denoiser
    dataset: ToyDataset
    config: ExperimentConfig
    seed_count: int = 3

    @property
    def seeds(self) -> list[int]:
        return [self.config.seed + offset for offset in range(self.seed_count)]

    def run(
        self,
        config: ExperimentConfig,
        seed: int,
        *,
        steps: int | None = None,
        record_trace: bool = False,
    ) -> FinetuneResult:
        sampler = TimestepSampler.from_config(config.sampler, config.schedule.T)
        kind = config.adapter.adapter_kind
        return finetune(
            self.base,
            self.dataset,
            config.adapter,
            sampler,
            config.training.steps_for(kind) if steps is None else steps,
            seed,
            training=config.training,
            record_trace=record_trace,
        )

    def averaged_eval(self, config: ExperimentConfig) -> EvalReport:
        reports = []
        for seed in self.seeds:
            tuned = self.run(config, seed).denoiser
            reports.append(evaluate(tuned, self.dataset, config.eval.n_per_condition, seed))
        return mean_reports(reports)


STANDARD_STEPS = 800


def rank_collapse(context: ExperimentContext) -> ExperimentOutcome:
    """Trained plain LoRA B loses effective rank; Ortho-initialised B keeps it."""

    config = context.config
    board = VerdictBoard("rank_collapse")
    outcome = ExperimentOutcome(board)
    r = config.adapter.r
    for kind in (AdapterKind.PLAIN_LORA, AdapterKind.ORTHO_LORA, AdapterKind.TLORA):
        r_min = (config.adapter.r_min or max(1, r // 2)) if kind.uses_schedule else None
        run_config = config.with_adapter(kind=kind.value, r_min=r_min)
        result = context.run(run_config, config.seed, steps=STANDARD_STEPS)
        reports = denoiser_spectra(result.denoiser)
        outcome.spectra[kind.value] = reports
        ranks = [report.effective_rank for report in reports]
        if kind is AdapterKind.PLAIN_LORA:
            board.check(
                "plain_lora_kollabiert",
                max(ranks) <= COLLAPSE_FRACTION * r,
                f"effektive Ränge {ranks}, Grenze {COLLAPSE_FRACTION * r:g}",
            )
        else:
            board.check(
                f"{kind.value}_voller_rang",
                all(report.is_full_rank for report in reports),
                f"effektive Ränge {ranks}, Maximum {max_effective_rank(r)}",
            )
    return outcome


def orthogonalization(context: ExperimentContext) -> ExperimentOutcome:
    """Regularised Gaussian factors stay far from orthogonal; Ortho factors start there."""

    config = context.config
    board = VerdictBoard("orthogonalization")
    outcome = ExperimentOutcome(board)
    adalora = context.run(
        config.with_adapter(kind=AdapterKind.ADALORA_SVD.value, r_min=None, lambda_reg=0.1),
        config.seed,
        steps=STANDARD_STEPS,
        record_trace=True,
    )
    ortho = context.run(
        config.with_adapter(kind=AdapterKind.ORTHO_LORA.value, r_min=None, lambda_reg=0.0),
        config.seed,
        steps=STANDARD_STEPS,
        record_trace=True,
    )
    adalora_trace = orthogonality_trace(adalora)
    ortho_trace = orthogonality_trace(ortho)
    outcome.traces = {"adalora_svd": adalora_trace, "ortho_lora": ortho_trace}
    start, end = adalora_trace.total(0), adalora_trace.total(adalora_trace.last_step)
    board.check(
        "adalora_bleibt_nicht_orthogonal",
        end > ADALORA_RETENTION * start,
        f"Fehler {start:.4g} → {end:.4g}",
    )
    ortho_start = ortho_trace.total(0)
    board.check("ortho_init_orthogonal", ortho_start <= ORTHO_INIT_TOLERANCE, f"Fehler bei Schritt 0: {ortho_start:.2e}")
    adalora_totals = adalora_trace.totals()
    below = all(value < adalora_totals.get(step, float("inf")) for step, value in ortho_trace.totals().items())
    board.check("ortho_unter_adalora", below, f"Ortho-Maximum {ortho_trace.maximum():.2e}")
    worst = ortho_trace.maximum()
    board.check(
        "ortho_bleibt_orthogonal",
        worst <= ORTHO_DRIFT_TOLERANCE,
        f"größter Fehler je Schicht {worst:.3g}, Summe bei Schritt {ortho_trace.last_step}: "
        f"{ortho_trace.total(ortho_trace.last_step):.3g}",
    )
    return outcome


def interval_study(context: ExperimentContext) -> ExperimentOutcome:
    """High-noise intervals lose context; low-noise intervals lose the concept shape."""

    config = context.config
    board = VerdictBoard("interval_study")
    outcome = ExperimentOutcome(board)
    T = config.schedule.T
    intervals = {"hoch": (int(0.8 * T), T), "mittel": (int(0.5 * T), int(0.8 * T)), "niedrig": (0, int(0.5 * T))}
    kind = AdapterKind.PLAIN_LORA
    lora_config = config.with_adapter(kind=kind.value, r_min=None)
    for label, (lo, hi) in intervals.items():
        run_config = lora_config.with_sampler(mode="interval", lo=lo, hi=hi)
        outcome.evals[label] = context.averaged_eval(run_config)
        board.measure(f"intervall_{label}", f"[{lo}, {hi}] mit {kind.value}")
    high, low = outcome.evals["hoch"], outcome.evals["niedrig"]
    board.check(
        "hoch_schlechtere_kontexttreue",
        high.context_alignment > low.context_alignment,
        f"{high.context_alignment:.4f} vs. {low.context_alignment:.4f}",
    )
    board.check(
        "niedrig_schlechtere_konzepttreue",
        low.concept_fidelity > high.concept_fidelity,
        f"{low.concept_fidelity:.4f} vs. {high.concept_fidelity:.4f}",
    )
    return outcome


def tradeoff(context: ExperimentContext) -> ExperimentOutcome:
    """T-LoRA keeps context better than plain LoRA at a bounded fidelity cost."""

    config = context.config
    board = VerdictBoard("tradeoff")
    outcome = ExperimentOutcome(board)
    r = config.adapter.r
    plain = context.averaged_eval(config.with_adapter(kind=AdapterKind.PLAIN_LORA.value, r_min=None))
    tlora = context.averaged_eval(config.with_adapter(kind=AdapterKind.TLORA.value, r_min=max(1, r // 2)))
    outcome.evals = {"plain_lora": plain, "tlora": tlora}
    board.check(
        "tlora_bessere_kontexttreue",
        tlora.context_alignment < plain.context_alignment,
        f"{tlora.context_alignment:.4f} vs. {plain.context_alignment:.4f}",
    )
    board.check(
        "konzepttreue_begrenzt",
        tlora.concept_fidelity <= (1.0 + FIDELITY_SLACK) * plain.concept_fidelity,
        f"{tlora.concept_fidelity:.4f} vs. {plain.concept_fidelity:.4f}",
    )
    return outcome


def init_sweep(context: ExperimentContext, ranks: tuple[int, ...] = (8, 16, 32)) -> ExperimentOutcome:
    """Every Ortho initialisation band and source as T-LoRA at several ranks."""

    config = context.config
    board = VerdictBoard("init_sweep")
    outcome = ExperimentOutcome(board)
    for r in ranks:
        if r > config.denoiser.hidden:
            continue
        for variant in ALL_VARIANTS:
            run_config = config.with_adapter(
                kind=AdapterKind.TLORA.value, r=r, r_min=max(1, r // 2), variant=variant.label
            )
            result = context.run(run_config, config.seed)
            report = evaluate(result.denoiser, context.dataset, config.eval.n_per_condition, config.seed)
            label = f"{variant.label}_r{r}"
            outcome.evals[label] = report
            board.measure(label, f"Konzept {report.concept_fidelity:.4f}, Kontext {report.context_alignment:.4f}")
    return outcome


def rmin_sweep(context: ExperimentContext, fractions: tuple[float, ...] = (0.25, 0.5, 1.0)) -> ExperimentOutcome:
    """T-LoRA with r_min at several fractions of r."""

    config = context.config
    board = VerdictBoard("rmin_sweep")
    outcome = ExperimentOutcome(board)
    r = config.adapter.r
    for fraction in fractions:
        r_min = max(1, int(round(fraction * r)))
        report = context.averaged_eval(config.with_adapter(kind=AdapterKind.TLORA.value, r_min=r_min))
        label = f"r_min_{r_min}"
        outcome.evals[label] = report
        board.measure(label, f"Konzept {report.concept_fidelity:.4f}, Kontext {report.context_alignment:.4f}")
    return outcome


RECIPES: dict[str, Callable[[ExperimentContext], ExperimentOutcome]] = {
    "rank_collapse": rank_collapse,
    "orthogonalization": orthogonalization,
    "interval_study": interval_study,
    "tradeoff": tradeoff,
    "init_sweep": init_sweep,
    "rmin_sweep": rmin_sweep,
}


def run_experiment(name: str, context: ExperimentContext) -> ExperimentOutcome:
    try:
        recipe = RECIPES[name]
    except KeyError as exc:
        raise ValueError(f"Unbekanntes Experiment '{name}' (erlaubt: {', '.join(RECIPES)})") from exc
    outcome = recipe(context)
    percent, label = outcome.board.progress()
    LOG.info(label)
    return outcome
