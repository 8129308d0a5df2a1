"""
Exception hierarchy for the MVLT toolkit.

Every error carries the process exit code the command-line surface reports for it.
"""

from typing import Optional


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class MvltError(Exception):
    """Base exception for all toolkit errors."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str, exit_code: Optional[int] = None):
        super().__init__(message)
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(MvltError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = EXIT_USAGE


class DataError(MvltError):
    """Dataset, label or image content problem."""

    exit_code = EXIT_DATA


class LabelError(DataError):
    """A label that cannot be encoded (length or content)."""


class CharsetError(LabelError):
    """A character outside the configured charset."""


class ManifestError(DataError):
    """A dataset manifest that is missing, malformed or used against its contract."""


class ShapeError(MvltError, ValueError):
    """Tensor or image dimensions that do not conform."""

    exit_code = EXIT_DATA


class TargetIndexError(MvltError, IndexError):
    """A class index outside [0, M)."""

    exit_code = EXIT_DATA


class ContractError(MvltError, RuntimeError):
    """An API used against its preconditions."""

    exit_code = EXIT_NUMERIC


class NumericError(MvltError):
    """Numeric failure: gradient check mismatch or non-finite values."""

    exit_code = EXIT_NUMERIC


class StorageError(MvltError):
    """File system failure. The message names the offending path."""

    exit_code = EXIT_IO

    def __init__(self, message: str, path: Optional[str] = None):
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)
        self.path = path


class CheckpointError(StorageError):
    """Checkpoint file with bad magic, wrong version, truncation or mismatched shapes."""
