"""Exception types used across the package.

The CLI maps these onto exit codes: usage errors exit 1, DataError 2,
OptimizationError 3, InvariantError 4.
"""


class AltprojError(Exception):
    """Base class for package errors."""


class DataError(AltprojError):
    """Malformed input data or a violated data contract."""


class ParseError(DataError):
    """A data or constraint file failed to parse; message carries the line."""


class ConfigError(AltprojError):
    """Inconsistent or incomplete configuration."""


class RoutingError(AltprojError):
    """A computation was requested through a path that cannot serve it.

    Typical case: asking for a closed-form expectation of a feature that is
    not edge-factored; such features need the sampling estimator instead.
    """


class OptimizationError(AltprojError):
    """An inner solve diverged or terminated abnormally."""


class StateSpaceError(AltprojError):
    """Exhaustive enumeration refused because the state space is too large."""


class InvariantError(AltprojError):
    """A runtime self-check failed."""
