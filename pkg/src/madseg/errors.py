"""Exception hierarchy shared by the whole package.

The service layer maps these onto error categories, and the CLI maps the
categories onto process exit codes: configuration problems exit 2, data
problems exit 3, numeric failures exit 4.
"""

from __future__ import annotations


class MadsegError(Exception):
    """Base class for all package errors."""

    category = "internal"


class ConfigurationError(MadsegError):
    """A config file, parameter combination, or request is invalid."""

    category = "config"


class ParameterError(ConfigurationError, ValueError):
    """A function argument violates its documented precondition."""


class DataError(MadsegError):
    """Input data is missing, malformed, or unusable."""

    category = "data"


class DatasetLayoutError(DataError):
    """A dataset directory does not have the expected tree shape."""


class ImageFileError(DataError):
    """An image file could not be read, decoded, or written."""


class CheckpointError(DataError):
    """A checkpoint archive is corrupt, truncated, or incompatible."""


class UndefinedMetricError(DataError):
    """A metric is undefined for the given inputs (e.g. one-class AUROC)."""


class NumericError(MadsegError):
    """A numeric invariant was violated (NaN/Inf loss, divergence)."""

    category = "numeric"


def error_category(exc: BaseException) -> str:
    """Return the service error category for an exception."""
    if isinstance(exc, MadsegError):
        return exc.category
    return "internal"


#: CLI exit code per error category.
EXIT_CODES = {"config": 2, "data": 3, "numeric": 4, "internal": 1}


def exit_code_for(category: str) -> int:
    """Map a service error category to the CLI exit code."""
    return EXIT_CODES.get(category, 1)
