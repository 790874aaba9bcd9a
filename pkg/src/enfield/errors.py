"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration/usage problems
exit 1, data/geometry problems exit 2, numeric failures exit 3.
"""


class EnfieldError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EnfieldError):
    """Invalid configuration: bad hyperparameters, unknown keys, odd dims."""


class ShapeError(EnfieldError):
    """Tensor or model/data dimension mismatch."""


class NumericError(EnfieldError):
    """A computation produced a non-finite value or diverged."""


class EncodeError(NumericError):
    """Inner-loop encoding failed; carries the offending step index."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


class CheckInvalidError(EnfieldError):
    """A gradient check could not run (e.g. the target is non-deterministic)."""


class DataError(EnfieldError):
    """Malformed, truncated or otherwise unreadable data files."""


class GeometryError(EnfieldError):
    """Impossible geometry: overlapping bodies, failed rejection sampling."""


class QuadratureError(EnfieldError):
    """Surface integral cannot be evaluated (too few or unordered points)."""
