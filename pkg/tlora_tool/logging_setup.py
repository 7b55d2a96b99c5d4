"""Logging configuration for command-line runs."""
from __future__ import annotations

import logging
import sys
from typing import TextIO

from .events import RunJournal

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
_SEVERITY_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}


class LoggingManager:
    """Installs the console handler on the root logger and feeds the run journal."""

    def __init__(self, journal: RunJournal | None = None, *, stream: TextIO | None = None) -> None:
        self.handler = logging.StreamHandler(stream or sys.stderr)
        self.handler.setFormatter(logging.Formatter(LOG_FORMAT))
        self.journal = journal or RunJournal()
        self._debug_enabled = False
        self._level_threshold = logging.INFO
        self._installed = False

    def start_logging(self) -> None:
        root = logging.getLogger()
        if self.handler not in root.handlers:
            root.addHandler(self.handler)
        self._installed = True
        self._apply_logging_level()
        logging.getLogger(__name__).debug("Protokollierung aktiv")

    def stop_logging(self) -> None:
        logging.getLogger().removeHandler(self.handler)
        self._installed = False

    def set_debug(self, enabled: bool) -> None:
        self._debug_enabled = enabled
        self._apply_logging_level()
        logging.getLogger(__name__).debug("Debugmodus %s", "aktiv" if enabled else "deaktiviert")

    def set_level_threshold(self, level_name: str) -> str:
        if not level_name or not isinstance(level_name, str):
            raise ValueError("Log-Level fehlt")
        resolved = getattr(logging, level_name.upper(), None)
        if not isinstance(resolved, int):
            raise ValueError(f"Unbekannter Log-Level: {level_name}")
        self._level_threshold = resolved
        self._apply_logging_level()
        return logging.getLevelName(resolved)

    @property
    def threshold(self) -> int:
        return logging.DEBUG if self._debug_enabled else self._level_threshold

    def _apply_logging_level(self) -> None:
        self.handler.setLevel(self.threshold)
        if self._installed:
            logging.getLogger().setLevel(min(self.threshold, logging.INFO))

    def log_system(self, message: str, *, severity: str = "info", event: str | None = None) -> None:
        """Log a status line and keep it in the journal under ``event``."""

        logging.getLogger(__name__).log(_SEVERITY_LEVELS.get(severity, logging.INFO), message)
        self.journal.record(event or "System", message, severity=severity)
