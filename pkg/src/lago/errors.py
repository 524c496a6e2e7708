"""Exception hierarchy shared by the estimation, inference and optimisation layers."""

from __future__ import annotations


class LagoError(Exception):
    """Base class for all package errors."""


class ValidationError(LagoError, ValueError):
    """Input data or configuration violates a documented contract."""


class EmptyDataset(ValidationError):
    pass


class NonContiguousCentres(ValidationError):
    pass


class WeightDimensionMismatch(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


class SingleArm(ValidationError):
    pass


class InvalidDirection(ValidationError):
    pass


class RhoOutOfRange(ValidationError):
    pass


class ParseError(ValidationError):
    """CSV or config text could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ValidationError):
    """One or more schema violations; all of them are listed in ``problems``."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ConfigError(ValidationError):
    """Invalid configuration value; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class NumericalError(LagoError, ArithmeticError):
    """Base class for numerical failures (exit code 3 in the CLI)."""


class RankDeficient(NumericalError):
    """The fixed-effects design is not of full column rank.

    ``columns`` lists the names of the columns involved in the collinearity.
    """

    def __init__(self, message: str, columns: list[str] | None = None):
        self.columns = list(columns or [])
        if self.columns:
            message = f"{message} (columns: {', '.join(self.columns)})"
        super().__init__(message)


class SingularJ(RankDeficient):
    pass


class SingularBlock(NumericalError):
    pass


class Infeasible(NumericalError):
    """The outcome goal cannot be reached anywhere in the box."""

    def __init__(self, message: str, best_mean: float | None = None):
        self.best_mean = best_mean
        super().__init__(message)
