"""Diagnostics helpers and guard rails for training and CLI commands."""
from __future__ import annotations

import functools
import logging
import math
import time
from typing import Callable, TypeVar

import numpy as np

from .errors import NumericalError

T = TypeVar("T")


def guarded_action(name: str, log: logging.Logger) -> Callable[[Callable[..., T]], Callable[..., T]]:
    """Wrap a function with start/success/failure lines and wall time.

    Exceptions are logged and re-raised, never swallowed.
    """

    def decorator(func: Callable[..., T]) -> Callable[..., T]:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            log.info("%s – gestartet", name)
            start = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as exc:
                log.error("%s – fehlgeschlagen nach %.2f s: %s", name, time.perf_counter() - start, exc)
                raise
            log.info("%s – erfolgreich (%.2f s)", name, time.perf_counter() - start)
            return result

        return wrapper

    return decorator


def check_finite(value: float | np.ndarray, what: str) -> None:
    """Raise ``NumericalError`` if ``value`` holds NaN or Inf."""

    if isinstance(value, np.ndarray):
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"{what} enthält NaN oder Inf")
    elif not math.isfinite(float(value)):
        raise NumericalError(f"{what} ist nicht endlich ({value})")


class ProgressLogger:
    """Logs a status line every ``every`` steps of a training loop."""

    def __init__(self, name: str, total: int, log: logging.Logger, *, every: int | None = None) -> None:
        if total < 0:
            raise ValueError("total darf nicht negativ sein")
        self.name = name
        self.total = total
        self.log = log
        self.every = every or max(1, total // 10)

    def step(self, index: int, loss: float) -> None:
        if index == self.total or index % self.every == 0:
            self.log.info("%s: Schritt %d/%d, Verlust %.5f", self.name, index, self.total, loss)
