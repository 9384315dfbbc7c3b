"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class AdaptError(Exception):
    """Base class for every error raised by the toolkit."""


class SchemaParseError(AdaptError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class UnsupportedConstructError(AdaptError):
    def __init__(self, construct: str, detail: str = ""):
        self.construct = construct
        msg = f"unsupported construct: {construct}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class InvariantViolation(AdaptError):
    """A domain object was built with values breaking its invariants."""


class InvalidHintError(AdaptError):
    pass


class RoutingError(AdaptError):
    """A pattern stage cannot process a message; callers divert it to dead-letter."""


class ConfigurationError(AdaptError):
    """A chain or harness is wired inconsistently; detected before messages flow."""


class UnsatisfiableAdaptationError(AdaptError):
    def __init__(self, message: str, leaf: str | None = None):
        self.leaf = leaf
        super().__init__(message)


class AmbiguityError(AdaptError):
    def __init__(self, message: str, ambiguities: list | None = None):
        self.ambiguities = ambiguities or []
        super().__init__(message)


class NoInteractionError(AdaptError):
    pass


class WiringError(AdaptError):
    pass


class AnalysisError(AdaptError):
    pass
