"""Exception types raised across the package.

Every error that code in this package raises on purpose derives from
:class:`AvoidanceError`, so callers can catch one base class at the CLI

boundary and still tell failure modes apart programmatically.
"""

from __future__ import annotations


class AvoidanceError(Exception):
    """Base class for all package errors."""


class UsageError(AvoidanceError):
    """A parameter combination that the contract of an operation rejects."""


class DomainError(UsageError):
    """A numeric argument outside the mathematical domain of a formula."""


class BudgetExceeded(AvoidanceError):
    """An enumeration or search would exceed its configured budget."""


class HorizonExceeded(AvoidanceError):
    """A walk failed to stop within its step cap."""


class SeparationInfeasible(AvoidanceError):
    """Rejection sampling for a separated boundary pair ran out of budget."""


class InsufficientExtension(AvoidanceError):
    """A path does not carry enough post-stop history for the request."""


class DegenerateFilter(AvoidanceError):
    """A path-set filter removed essentially everything (over 90 percent)."""


class MarginalMismatch(AvoidanceError):
    """A coupling table failed its exact marginal verification."""


class StepFailed(AvoidanceError):
    """A multiscale drive step could not complete.

    Carries the step index and a reason string so drives can be restarted
    from recorded state.
    """

    def __init__(self, step_index: int, reason: str):
        self.step_index = step_index
        self.reason = reason
        super().__init__(f"step {step_index}: {reason}")


class IoError(AvoidanceError):
    """A report or dump could not be written."""
