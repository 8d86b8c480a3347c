"""Exception hierarchy shared across the toolkit.

The CLI maps these onto distinct exit codes: usage errors exit 1,
DataError exits 2, NumericsError exits 3.
"""


class PlatesmithError(Exception):
    """Base class for all toolkit errors."""


class DataError(PlatesmithError):
    """Malformed, missing, or inconsistent data (files, records, manifests)."""


class FormatError(DataError):
    """A file failed to parse; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericsError(PlatesmithError):
    """Non-finite values or numerically invalid inputs in a computation."""
