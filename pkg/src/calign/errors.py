"""Exception types shared across the package.

The CLI maps these onto exit codes: validation/config/data problems exit
with 2, I/O problems (plain OSError) with 1.
"""


class CalignError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(CalignError):
    """Non-finite, out-of-domain, or mis-shaped numeric input."""


class InvalidEvidenceError(CalignError):
    """Beta evidence parameters violate positivity."""


class InvalidBoxError(CalignError):
    """Degenerate or malformed box coordinates."""


class ConfigError(CalignError):
    """Bad run configuration (unknown key, wrong type, invalid mode)."""


class FormatError(CalignError):
    """Malformed serialized artifact (manifest, blob size, CSV schema)."""


class DataError(CalignError):
    """Structurally valid file carrying invalid payload (NaN/Inf values)."""
