"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration misuse -> 1,
malformed data files -> 2, numeric failures during training -> 3.
"""


class SggnnError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SggnnError):
    """Invalid configuration value or inconsistent experiment setup."""


class DataFormatError(SggnnError):
    """Malformed corpus, checkpoint or report file."""


class NumericError(SggnnError):
    """Non-finite loss or gradient encountered during optimization."""
