"""Exception types shared across the package.

Each class maps to a stable CLI exit status (see ``cli.EXIT_CODES``).
"""


class CAEError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(CAEError, ValueError):
    """Invalid configuration value, unknown key, or violated precondition."""


class FormatError(CAEError):
    """A file on disk does not match its binary or text format."""


class TrainingError(CAEError, RuntimeError):
    """Training could not proceed (non-finite loss, underfit teacher, ...)."""


class OutputError(CAEError):
    """An output location is unwritable or would overwrite an existing run."""
