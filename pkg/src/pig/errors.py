"""Exception taxonomy shared by every module in the package.

All package errors derive from PigError so callers can catch one type at
the boundary.  The CLI maps PigError (and its subclasses) to exit code 1
and anything else to exit code 2.
"""

from __future__ import annotations


class PigError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(PigError, ValueError):
    """An argument violates the documented contract of an operation."""


class DivergenceUndefined(PigError):
    """KL divergence is undefined: p carries mass where q has none."""


class DegenerateSpan(PigError):
    """The source span retains no positive attention mass."""


class SequenceError(PigError):
    """A backend session was driven out of order."""


class EndOfTrace(PigError):
    """A trace-backed session has no further recorded steps."""


class DatasetError(PigError):
    """A dataset file is malformed.  Carries the line and field at fault."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if field is not None:
            parts.append(f"field {field!r}")
        prefix = ", ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.line = line
        self.field = field


class SchemaError(PigError):
    """A trace record violates the trace schema.

    ``field`` names the offending header or step key so tests and error
    messages can distinguish corruption categories.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class UnsupportedVersion(SchemaError):
    """The trace declares a format version this package cannot read."""

    def __init__(self, message: str):
        super().__init__("v", message)


class UsageError(PigError):
    """Bad command line usage (unknown flag, missing argument)."""


def annotate(exc: PigError, prefix: str) -> PigError:
    """Rebuild exc with a location prefix, preserving its type when possible."""
    try:
        return type(exc)(f"{prefix}: {exc}")
    except TypeError:
        return PigError(f"{prefix}: {exc}")
