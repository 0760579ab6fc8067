"""
Exception types shared by the solvers and the command line.
"""

from __future__ import annotations


class ChemoKineticsError(Exception):
    """Base class for every error raised by this package."""

    def __reduce__(self):
        # keyword-only constructors do not survive the default exception pickling
        return (_restore, (type(self), self.args, dict(self.__dict__)))


def _restore(cls, args, state):
    exc = Exception.__new__(cls)
    exc.args = args
    exc.__dict__.update(state)
    return exc


class ConfigurationError(ChemoKineticsError, ValueError):
    """A scenario, spec or grid is inconsistent; nothing was run."""


class DomainError(ChemoKineticsError, ValueError):
    """An argument lies outside the domain of a mathematical operation."""


class NumericalError(ChemoKineticsError, RuntimeError):
    """A numerical procedure failed to reach its tolerance."""

    def __init__(self, message: str, *, achieved: float | None = None):
        super().__init__(message)
        self.achieved = achieved


class SolverInstabilityError(NumericalError):
    """A time step produced negative densities beyond round-off."""

    def __init__(self, message: str, *, substep: str, min_value: float):
        super().__init__(message, achieved=min_value)
        self.substep = substep
        self.min_value = min_value


class CorruptedStateError(NumericalError):
    """A diagnostic functional evaluated to NaN or ±inf."""

    def __init__(self, functional: str):
        super().__init__(f"diagnostic '{functional}' is not finite; the state is corrupted")
        self.functional = functional


class BoundViolationError(NumericalError):
    """A stored kernel bound was exceeded during a simulation."""


class StatisticsError(ChemoKineticsError, RuntimeError):
    """Particle statistics cannot support the requested comparison."""
