"""Run journal: config warnings, verdicts and failures of one command-line run."""
from __future__ import annotations

import dataclasses
import datetime as _dt
import json
import pathlib
from collections import Counter, deque

SEVERITIES = ("debug", "info", "warn", "error")
_ALIASES = {"warning": "warn"}


def _utc_now() -> _dt.datetime:
    return _dt.datetime.now(_dt.timezone.utc)


@dataclasses.dataclass(frozen=True)
class RunEvent:
    name: str
    message: str
    severity: str = "info"
    timestamp: _dt.datetime = dataclasses.field(default_factory=_utc_now)

    def __post_init__(self) -> None:
        if not str(self.name).strip():
            raise ValueError("Ereignisname darf nicht leer sein")
        if not str(self.message).strip():
            raise ValueError("Ereignistext darf nicht leer sein")
        severity = str(self.severity).lower()
        severity = _ALIASES.get(severity, severity)
        if severity not in SEVERITIES:
            raise ValueError(f"Unbekannte Schwere '{self.severity}' (erlaubt: {', '.join(SEVERITIES)})")
        object.__setattr__(self, "severity", severity)

    def to_dict(self) -> dict[str, str]:
        return {
            "time": self.timestamp.replace(microsecond=0).isoformat(),
            "severity": self.severity,
            "name": self.name,
            "message": self.message,
        }


class RunJournal:
    """Bounded record of what a run reported; the oldest entries drop first."""

    def __init__(self, *, max_events: int = 200) -> None:
        if max_events <= 0:
            raise ValueError("max_events muss größer als 0 sein")
        self._events: deque[RunEvent] = deque(maxlen=max_events)

    def record(self, name: str, message: str, *, severity: str = "info") -> RunEvent:
        event = RunEvent(name=name, message=message, severity=severity)
        self._events.append(event)
        return event

    def snapshot(self) -> list[RunEvent]:
        return list(self._events)

    def count(self, severity: str) -> int:
        severity = _ALIASES.get(severity, severity)
        return sum(1 for event in self._events if event.severity == severity)

    def digest(self) -> str:
        """``name (severity)`` per event, repeats folded into ``×n``."""

        if not self._events:
            return "Keine Ereignisse protokolliert"
        counts = Counter((event.name, event.severity) for event in self._events)
        parts = []
        for (name, severity), n in counts.items():
            parts.append(f"{name} ({severity})" + (f" ×{n}" if n > 1 else ""))
        return ", ".join(parts)

    def write_jsonl(self, path: pathlib.Path | str) -> pathlib.Path:
        """One JSON object per line, in recording order."""

        target = pathlib.Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(event.to_dict(), ensure_ascii=False, sort_keys=True) for event in self._events]
        target.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return target
