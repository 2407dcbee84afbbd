"""Exception hierarchy and CLI exit codes."""
from typing import Optional


class ValleyError(Exception):
    """Base class for every expected failure of the toolkit."""

    exit_code = 1


class ConfigError(ValleyError, ValueError):
    """Invalid or unknown configuration."""

    exit_code = 2


class DataError(ValleyError, ValueError):
    """Malformed, missing or inconsistent input data."""

    exit_code = 3


class DimensionMismatchError(DataError):
    """A configuration or pattern has the wrong number of spins/units."""

    def __init__(self, expected: int, actual: int, what: str = "configuration"):
        super().__init__(f"size mismatch: {what} has length {actual}, expected {expected}")
        self.expected = expected
        self.actual = actual


class ParseError(DataError):
    """A text file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, source: str = "<text>", line: Optional[int] = None):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.source = source
        self.line = line


class ModelFormatError(ParseError):
    pass


class SampleFormatError(ParseError):
    pass


class CheckpointError(DataError):
    """Checkpoint is truncated, corrupted or belongs to another run."""


class TrainingDivergedError(DataError):
    """RBM parameters became non-finite during training."""


class ArrheniusFitError(DataError):
    """Too few usable escape-rate points for a fit."""


class NotAMinimumError(ValleyError, ValueError):
    """An operation that needs a local minimum was handed another state."""

    exit_code = 3


class ResourceCapError(ValleyError):
    """A size or budget cap was reached before the work completed."""

    exit_code = 4
