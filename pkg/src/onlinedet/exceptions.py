"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (config 2, data 3, training 4).
"""


class OnlineDetError(Exception):
    """Base class for all package errors."""


class ConfigError(OnlineDetError, ValueError):
    """Invalid configuration (bad anchor grid, empty search grid, ...)."""


class DataError(OnlineDetError, ValueError):
    """Invalid or unreadable data (codec, manifest, annotations)."""


class TrainingError(OnlineDetError, RuntimeError):
    """Training cannot proceed (no positives anywhere, fit failure)."""
