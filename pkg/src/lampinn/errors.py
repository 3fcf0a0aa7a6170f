"""Exception types shared across the package."""

from __future__ import annotations


class LamPinnError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LamPinnError, ValueError):
    pass


class ContractError(LamPinnError, ValueError):
    pass


class InputShapeError(ContractError):
    pass


class InvalidTaskError(LamPinnError, ValueError):
    pass


class DomainError(LamPinnError, ValueError):
    pass


class UndefinedMetricError(LamPinnError, ValueError):
    pass


class NumericError(LamPinnError, ArithmeticError):
    """A loss or intermediate quantity became non-finite.

    ``point`` holds the coordinates of the worst offending location (an
    input coordinate for residual failures, the parameter vector for
    gradient failures).
    """

    def __init__(self, message: str, point=None):
        super().__init__(message)
        self.point = point


class NumericOverflowError(NumericError):
    pass


class CheckpointError(LamPinnError, ValueError):
    """Unreadable checkpoint or reference file; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionMismatchError(CheckpointError):
    pass
