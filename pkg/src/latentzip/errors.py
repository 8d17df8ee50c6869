"""Exception hierarchy shared across the package."""


class LatentzipError(Exception):
    """Base class for all package errors."""


class ConfigError(LatentzipError):
    """Invalid configuration (bad flags, incompatible geometry)."""


class DataError(LatentzipError):
    """Malformed or inconsistent input data or files."""


class ContainerError(DataError):
    """Corrupt, truncated, or unsupported compressed container."""


class CodingError(LatentzipError):
    """Entropy-coding failure (symbol outside support, truncated stream)."""


class TrainingDiverged(LatentzipError):
    """Training loss became non-finite; carries the recorded loss trace."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class BoundUnreachableError(LatentzipError):
    """The error-bound stage failed to enforce tau.

    The lossless fallback makes this unreachable in correct operation; seeing
    it means a bug, hence a dedicated exit code in the CLI.
    """
