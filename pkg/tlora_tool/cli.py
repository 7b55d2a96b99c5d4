"""Command-line entry point: ``tlora <command> [options]``.

Exit codes: 0 success, 2 configuration/usage/checkpoint error, 3 numerical
failure (SVD non-convergence, non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import pathlib
import sys
from typing import Callable, Sequence

from . import checkpoint as ckpt
from . import reports
from .analysis import denoiser_spectra, evaluate, weight_spectrum_comparison
from .config import ExperimentConfig, load_config
from .diagnostics import guarded_action
from .diffusion import Denoiser, TimestepSampler, ToyDataset, finetune, format_condition, parse_condition, pretrain, sample
from .errors import CheckpointError, ConfigError, DecompositionError, DomainError, NumericalError
from .experiments import FAILED, ExperimentContext, RECIPES, run_experiment
from .gradcheck import GradientCheck
from .logging_setup import LoggingManager

LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class GradientCheckFailed(Exception):
    """At least one gradient case exceeded the tolerance."""


def _config_from_checkpoint(checkpoint: ckpt.Checkpoint) -> ExperimentConfig:
    payload = checkpoint.metadata.get("config")
    if payload is None:
        raise CheckpointError("Checkpoint enthält keine Konfiguration")
    return ExperimentConfig.from_dict(payload)


def _dataset(config: ExperimentConfig) -> ToyDataset:
    return ToyDataset.from_config(config.dataset, config.seed)


def _save(path: str, denoiser: Denoiser, config: ExperimentConfig, stage: str) -> pathlib.Path:
    return ckpt.save(path, ckpt.from_denoiser(denoiser, config=config.to_dict(), stage=stage))


def cmd_pretrain(args: argparse.Namespace, manager: LoggingManager) -> int:
    config = load_config(args.config)
    denoiser = Denoiser.from_config(config, config.seed)
    result = pretrain(
        _dataset(config),
        denoiser,
        config.training.pretrain_steps,
        config.seed,
        batch_size=config.training.pretrain_batch,
        lr=config.training.pretrain_lr,
    )
    target = _save(args.out, result.denoiser, config, "pretrained")
    reports.write_csv(
        config.output.resolve("loss_trace", target), reports.LOSS_HEADER, reports.loss_rows(result.losses)
    )
    manager.log_system(f"Vortraining abgeschlossen: {target}", event="pretrain")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace, manager: LoggingManager) -> int:
    config = load_config(args.config)
    base = ckpt.to_denoiser(ckpt.load(args.base))
    if config.adapter.ignores_r_min:
        manager.log_system(
            f"Adapterart {config.adapter.kind}: r_min={config.adapter.r_min} wird ignoriert",
            severity="warn",
            event="config",
        )
    sampler = TimestepSampler.from_config(config.sampler, config.schedule.T)
    result = finetune(
        base,
        _dataset(config),
        config.adapter,
        sampler,
        config.training.steps_for(config.adapter.adapter_kind),
        config.seed,
        training=config.training,
    )
    target = _save(args.out, result.denoiser, config, "finetuned")
    reports.write_csv(
        config.output.resolve("metrics", target),
        reports.METRICS_HEADER,
        [(m.step, m.loss, m.err_A, m.err_B, m.eff_rank_B, m.rank_t) for m in result.metrics],
    )
    if result.trace:
        reports.write_csv(
            config.output.resolve("trace", target),
            reports.TRACE_HEADER,
            [(row.step, row.layer, row.err_A, row.err_B) for row in result.trace],
        )
    manager.log_system(f"Feinabstimmung abgeschlossen: {target}", event="finetune")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace, manager: LoggingManager) -> int:
    denoiser = ckpt.to_denoiser(ckpt.load(args.checkpoint))
    condition = parse_condition(args.condition)
    points = sample(denoiser, condition, args.n, args.seed, t_override=args.t_override)
    reports.write_csv(args.out, reports.SAMPLE_HEADER, reports.sample_rows(points, format_condition(condition)))
    manager.log_system(f"{args.n} Samples für {format_condition(condition)} geschrieben", event="sample")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, manager: LoggingManager) -> int:
    denoiser = ckpt.to_denoiser(ckpt.load(args.checkpoint))
    if not denoiser.has_adapters:
        raise CheckpointError("Checkpoint enthält keine Adapter")
    spectra = denoiser_spectra(denoiser, fraction=args.fraction, strict=False)
    out = pathlib.Path(args.out)
    reports.write_csv(out, reports.SPECTRUM_HEADER, [row for report in spectra for row in report.rows()])
    reports.write_csv(
        out.with_name(f"{out.stem}_ranks.csv"),
        ("layer", "effective_rank", "r"),
        [(report.layer, report.effective_rank, report.r) for report in spectra],
    )
    if args.compare_random:
        rows = []
        for name, adapter in denoiser.adapters.items():
            comparison = weight_spectrum_comparison(adapter.W, adapter.r, adapter.seed)
            rows.extend((f"{name}:{matrix}", index, sigma) for matrix, index, sigma in comparison.rows())
            LOG.info(
                "%s: kleinste %d Singulärwerte R/W = %.3g", name, adapter.r, comparison.tail_ratio(adapter.r)
            )
        reports.write_csv(out.with_name(f"{out.stem}_weights.csv"), reports.SPECTRUM_HEADER, rows)
    for report in spectra:
        manager.log_system(f"{report.layer}: effektiver Rang {report.effective_rank}/{report.r}", event="analyze")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, manager: LoggingManager) -> int:
    checkpoint = ckpt.load(args.checkpoint)
    denoiser = ckpt.to_denoiser(checkpoint)
    config = load_config(args.config) if args.config else _config_from_checkpoint(checkpoint)
    n = args.n or config.eval.n_per_condition
    report = evaluate(denoiser, _dataset(config), n, args.seed)
    reports.write_csv(args.out, reports.EVAL_HEADER, report.rows())
    manager.log_system(
        f"Konzepttreue {report.concept_fidelity:.5f}, Kontexttreue {report.context_alignment:.5f}", event="evaluate"
    )
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, manager: LoggingManager) -> int:
    check = GradientCheck(args.seed)
    report = check.full_check()
    for line in check.human_summary(report):
        LOG.info(line)
    if report["gesamt"] != "ok":
        raise GradientCheckFailed("Gradientenprüfung fehlgeschlagen")
    manager.log_system("Gradientenprüfung bestanden", event="gradcheck")
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace, manager: LoggingManager) -> int:
    config = load_config(args.config)
    base = ckpt.to_denoiser(ckpt.load(args.base))
    context = ExperimentContext(base, _dataset(config), config, seed_count=args.seeds)
    outcome = run_experiment(args.name, context)
    out = pathlib.Path(args.out)
    reports.write_csv(out / "verdicts.csv", reports.VERDICT_HEADER, outcome.board.rows())
    for label, spectra in outcome.spectra.items():
        reports.write_csv(
            out / f"spectrum_{label}.csv",
            reports.SPECTRUM_HEADER,
            [row for report in spectra for row in report.rows()],
        )
    for label, trace in outcome.traces.items():
        reports.write_csv(out / f"trace_{label}.csv", reports.TRACE_HEADER, trace.as_rows())
    for label, report in outcome.evals.items():
        reports.write_csv(out / f"eval_{label}.csv", reports.EVAL_HEADER, report.rows())
    for verdict in outcome.board.verdicts:
        severity = "warn" if verdict.status == FAILED else "info"
        detail = f" – {verdict.detail}" if verdict.detail else ""
        manager.journal.record(f"{args.name}/{verdict.criterion}", f"{verdict.status}{detail}", severity=severity)
    if outcome.board.passed:
        manager.log_system(f"Experiment {args.name}: alle Kriterien bestanden", event=args.name)
    else:
        manager.log_system(f"Experiment {args.name}: Kriterien nicht bestanden", severity="warn", event=args.name)
    manager.journal.write_jsonl(out / "events.jsonl")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tlora", description="Zeitschrittabhängige LoRA auf einem Spielzeug-DDPM")
    parser.add_argument("--debug", action="store_true", help="Debug-Ausgaben aktivieren")
    parser.add_argument("--log-level", default="INFO", help="Mindest-Level der Konsolenausgabe")
    parser.add_argument("--events", default=None, help="Ereignisprotokoll des Laufs als JSON-Zeilen schreiben")
    commands = parser.add_subparsers(dest="command", required=True)

    pre = commands.add_parser("pretrain", help="Basismodell trainieren")
    pre.add_argument("--config", required=True)
    pre.add_argument("--out", required=True)
    pre.set_defaults(handler=cmd_pretrain)

    fine = commands.add_parser("finetune", help="Adapter auf das Konzept trainieren")
    fine.add_argument("--base", required=True)
    fine.add_argument("--config", required=True)
    fine.add_argument("--out", required=True)
    fine.set_defaults(handler=cmd_finetune)

    smp = commands.add_parser("sample", help="Punkte erzeugen")
    smp.add_argument("--checkpoint", required=True)
    smp.add_argument("--condition", default="V*+c0")
    smp.add_argument("--n", type=int, default=256)
    smp.add_argument("--seed", type=int, default=0)
    smp.add_argument("--t-override", type=int, default=None, dest="t_override")
    smp.add_argument("--out", required=True)
    smp.set_defaults(handler=cmd_sample)

    ana = commands.add_parser("analyze", help="Singulärspektren der Adapter")
    ana.add_argument("--checkpoint", required=True)
    ana.add_argument("--fraction", type=float, default=0.95)
    ana.add_argument("--compare-random", action="store_true", dest="compare_random")
    ana.add_argument("--out", required=True)
    ana.set_defaults(handler=cmd_analyze)

    ev = commands.add_parser("evaluate", help="Konzept- und Kontexttreue messen")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--n", type=int, default=None)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", required=True)
    ev.set_defaults(handler=cmd_evaluate)

    grad = commands.add_parser("gradcheck", help="Gradienten gegen finite Differenzen prüfen")
    grad.add_argument("--seed", type=int, default=0)
    grad.set_defaults(handler=cmd_gradcheck)

    exp = commands.add_parser("experiment", help="Experimentrezept ausführen")
    exp.add_argument("name", choices=sorted(RECIPES))
    exp.add_argument("--base", required=True)
    exp.add_argument("--config", required=True)
    exp.add_argument("--seeds", type=int, default=3)
    exp.add_argument("--out", required=True)
    exp.set_defaults(handler=cmd_experiment)
    return parser


def _run(handler: Callable[[argparse.Namespace, LoggingManager], int], args: argparse.Namespace, manager: LoggingManager) -> int:
    try:
        return guarded_action(f"Befehl {args.command}", LOG)(handler)(args, manager)
    except json.JSONDecodeError as exc:
        manager.log_system(f"JSON-Fehler in Zeile {exc.lineno}, Spalte {exc.colno}: {exc.msg}", severity="error")
    except ConfigError as exc:
        manager.log_system(f"Ungültige Konfiguration – {exc}", severity="error", event=exc.field)
    except (CheckpointError, DomainError, FileNotFoundError) as exc:
        manager.log_system(str(exc), severity="error")
    except (DecompositionError, NumericalError, GradientCheckFailed) as exc:
        manager.log_system(str(exc), severity="error", event="numerik")
        return EXIT_NUMERICAL
    return EXIT_USAGE


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    manager = LoggingManager()
    manager.start_logging()
    try:
        manager.set_debug(args.debug)
        try:
            manager.set_level_threshold(args.log_level)
        except ValueError as exc:
            manager.log_system(str(exc), severity="error")
            return EXIT_USAGE
        code = _run(args.handler, args, manager)
        journal = manager.journal
        LOG.info("Ereignisse: %s", journal.digest())
        if journal.count("warn"):
            LOG.warning("Lauf mit %d Warnung(en) beendet", journal.count("warn"))
        if args.events:
            journal.write_jsonl(args.events)
        return code
    finally:
        manager.stop_logging()
