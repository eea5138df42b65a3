"""Exception hierarchy shared by every solver module and mapped to CLI exit codes."""

from __future__ import annotations


class MckvlqError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(MckvlqError, ValueError):
    """Inputs violate a documented invariant (exit code 2)."""


class DomainError(InvalidInputError):
    """A closed form was requested outside the parameter set where it holds."""


class NumericFailure(MckvlqError, ArithmeticError):
    """A numerical procedure failed at run time (exit code 3)."""


class NonConvergenceError(NumericFailure):
    """Iterative solver hit its iteration cap; ``best`` holds the last iterate."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class FiniteEscapeError(NumericFailure):
    """A Riccati trajectory left the overflow guard before reaching ``t0``."""

    def __init__(self, message: str, escape_time: float):
        super().__init__(message)
        self.escape_time = escape_time


class InvariantViolationError(NumericFailure):
    """A computed quantity broke a structural invariant (e.g. ``P1 <= 0``)."""


class ResourceError(MckvlqError, MemoryError):
    """A request would need more memory or work than the configured cap."""
