"""CSV emission for traces, metrics, samples, spectra, evaluations and verdicts."""
from __future__ import annotations

import csv
import pathlib
from typing import Iterable, Sequence

import numpy as np

LOSS_HEADER = ("step", "loss")
METRICS_HEADER = ("step", "loss", "err_A", "err_B", "eff_rank_B", "rank_t")
SAMPLE_HEADER = ("x", "y", "condition_token")
SPECTRUM_HEADER = ("layer", "index", "sigma")
TRACE_HEADER = ("step", "layer", "err_A", "err_B")
EVAL_HEADER = ("metric", "condition", "value")
VERDICT_HEADER = ("experiment", "criterion", "status", "detail")


def _cell(value: object) -> str:
    """Floats are written with 17 significant digits so they read back exactly."""

    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: pathlib.Path | str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> pathlib.Path:
    target = pathlib.Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"Zeile hat {len(row)} Spalten, erwartet {len(header)}")
            writer.writerow([_cell(value) for value in row])
    return target


def read_csv(path: pathlib.Path | str) -> list[dict[str, str]]:
    with pathlib.Path(path).open(encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def loss_rows(losses: Sequence[float]) -> list[tuple[int, float]]:
    return [(step, loss) for step, loss in enumerate(losses, start=1)]


def sample_rows(points: np.ndarray, condition: str) -> list[tuple[float, float, str]]:
    return [(float(x), float(y), condition) for x, y in np.asarray(points)]
