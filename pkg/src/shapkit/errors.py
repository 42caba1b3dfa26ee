"""Error taxonomy shared by every module.

Usage and capability problems exit the CLI with status 2; domain, numerical
and training failures exit with status 3.
"""


class ShapkitError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(ShapkitError):
    """Malformed arguments, files, or call sequences."""

    exit_code = 2


class CapabilityError(ShapkitError):
    """Request exceeds a hard limit (e.g. exact enumeration beyond d=20)."""

    exit_code = 2


class DomainError(ShapkitError):
    """Mathematically invalid input (NaNs, fully masked rows, empty sets)."""

    exit_code = 3


class NumericalError(ShapkitError):
    """A solve or factorization failed beyond recovery."""

    exit_code = 3


class TrainingError(ShapkitError):
    """Training diverged (non-finite loss); carries the failing step index."""

    exit_code = 3

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
