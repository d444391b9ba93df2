"""Shared exception types.

The CLI maps these onto exit codes: usage errors -> 1, data errors -> 2,
numeric failures -> 3.
"""


class GraphAdsError(Exception):
    """Base class for all package errors."""


class ShapeError(GraphAdsError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(GraphAdsError, ValueError):
    """Input values are outside the mathematical domain of an operation."""


class ContractError(GraphAdsError, RuntimeError):
    """A caller broke an API precondition (missing grad, bad batch size, ...)."""


class ConfigError(GraphAdsError, ValueError):
    """Invalid or inconsistent configuration."""


class BuildError(GraphAdsError, ValueError):
    """Graph construction failed, e.g. logs referencing unknown entities."""


class GraphLookupError(GraphAdsError, KeyError):
    """A node or edge was requested that does not exist."""


class ParseError(GraphAdsError, ValueError):
    """A serialized artifact could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(GraphAdsError, ArithmeticError):
    """A non-finite value appeared where the pipeline requires finite math."""
