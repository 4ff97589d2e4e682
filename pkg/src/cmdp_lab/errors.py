from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

if TYPE_CHECKING:
    from .cmdp import Violation
    from .planner import PlanOutcome


class CmdpLabError(Exception):
    """Base class for every error raised by cmdp-lab."""


class InvalidModelError(CmdpLabError):
    def __init__(self, message: str, violations: Sequence["Violation"] = ()) -> None:
        self.violations = list(violations)
        if self.violations:
            details = "; ".join(str(v) for v in self.violations[:5])
            more = len(self.violations) - 5
            if more > 0:
                details += f"; ... ({more} more)"
            message = f"{message}: {details}"
        super().__init__(message)


class NonUnichainError(CmdpLabError):
    """The chain induced by a policy does not have a single recurrent class."""


class PlanningError(CmdpLabError):
    """A planner broke down numerically. Never treated as infeasibility."""

    def __init__(self, message: str, outcome: "PlanOutcome | None" = None) -> None:
        self.outcome = outcome
        super().__init__(message)


class InfeasibleError(CmdpLabError):
    pass


class GridSpecError(CmdpLabError):
    pass


class ConfigError(CmdpLabError):
    pass


class HarnessError(CmdpLabError):
    pass
