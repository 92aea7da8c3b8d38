"""Exception types shared across the toolkit."""

from __future__ import annotations


class AscError(Exception):
    """Base class for domain errors (CLI maps these to exit code 1)."""


class FormatError(AscError, ValueError):
    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ShapeError(AscError, ValueError):
    pass


class DivergenceError(AscError, FloatingPointError):
    def __init__(self, iteration: int, lr: float, loss: float) -> None:
        super().__init__(f"training diverged at iteration {iteration} (lr={lr:g}, loss={loss})")
        self.iteration = iteration
        self.lr = lr


class SubmissionRejected(AscError):
    def __init__(self, team: str, next_allowed) -> None:
        super().__init__(f"team {team!r} reached the daily submission limit; next allowed at {next_allowed.isoformat()}")
        self.team = team
        self.next_allowed = next_allowed
