"""Exception types raised across the toolkit."""

from __future__ import annotations


class SheathError(Exception):
    """Base class for every error raised by sheathkit."""


class NonPositiveDensity(SheathError):
    pass


class QuadratureFailure(SheathError):
    pass


class CurvatureDegenerate(SheathError):
    pass


class RangeExceeded(SheathError):
    pass


class NoConvergence(SheathError):
    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan"), history=None):
        super().__init__(f"{message} (iterations={iterations}, residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual
        self.history = list(history) if history is not None else []


class ConstraintViolation(SheathError):
    pass


class SingularSystem(SheathError):
    pass


class HistoryGap(SheathError):
    pass


class HorizonExceeded(SheathError):
    pass


class SeparatrixPoint(SheathError):
    pass


class UnresolvedSupport(SheathError):
    pass


class PicardDiverged(SheathError):
    def __init__(self, message: str, iterates=None):
        super().__init__(message)
        self.iterates = list(iterates) if iterates is not None else []


class EdgeMass(SheathError):
    """Raised when the fluctuation reaches the velocity truncation boundary."""


class ConditionViolated(SheathError):
    pass


class ParseError(SheathError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        loc = f" at line {line}" if line is not None else ""
        super().__init__(f"{message}{loc}")
        self.line = line
        self.key = key


class ValidationError(SheathError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason
