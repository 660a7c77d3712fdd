"""Exception types shared across the toolchain.

The CLI maps these onto exit codes: validation failures exit 1, I/O
failures exit 2, training failures exit 3.
"""

from __future__ import annotations


class CurriclmError(Exception):
    """Base class for all toolchain errors."""


class ValidationError(CurriclmError):
    """Bad input values, malformed configuration, or contract violations."""


class ParseError(ValidationError):
    """Strict sequence parsing failed.

    Carries the byte offset of the offending token and the set of tokens
    that would have been accepted there.
    """

    def __init__(self, message: str, offset: int, expected: frozenset[str]):
        super().__init__(message)
        self.offset = offset
        self.expected = expected


class IngestError(CurriclmError):
    """A data file exists but does not match its declared schema."""


class TrainingError(CurriclmError):
    """Optimization failed (non-finite loss or gradient).

    ``trace`` holds the evaluations completed before the failure.
    """

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
