"""Exception hierarchy shared by all tlora_tool modules."""
from __future__ import annotations


class TLoraError(Exception):
    """Base class for every error raised on purpose by the toolkit."""


class DomainError(TLoraError, ValueError):
    """Argument outside its valid range or shapes that do not fit together."""


class UndefinedRankError(DomainError):
    """Effective rank requested for an all-zero spectrum."""


class ConfigError(TLoraError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class DecompositionError(TLoraError, ArithmeticError):
    """SVD did not converge within its sweep budget."""


class NumericalError(TLoraError, ArithmeticError):
    """A loss or parameter became NaN or infinite."""


class CheckpointError(TLoraError, ValueError):
    """Checkpoint file is malformed or incompatible."""
