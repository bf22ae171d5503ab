"""Exception hierarchy shared by every module."""

from __future__ import annotations

from pathlib import Path


class QkdError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(QkdError, ValueError):
    """Raised when tensor shapes or convolution geometry do not agree."""


class DomainError(QkdError, ValueError):
    """Raised when an argument lies outside the operation's domain."""


class DegenerateInputError(DomainError):
    """Raised when a step size is requested for a zero-variance weight vector."""


class ConfigError(QkdError):
    """Raised for invalid configs, incompatible specs and missing checkpoints."""


class IntegrityError(QkdError):
    """Raised when a checkpoint file is truncated or fails its checksum."""


class UsageError(QkdError):
    """Raised for CLI misuse and empty report selections."""


class NonFiniteLossError(QkdError):
    """Raised when a training run diverges: a NaN or infinite loss, logit or weight."""

    def __init__(self, message: str, *, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class FormatError(QkdError):
    """Raised when a dataset file does not match its binary format."""

    def __init__(self, message: str, *, path: str | Path | None = None, offset: int | None = None):
        detail = message
        if path is not None:
            detail = f"{detail} (file={path}"
            detail += f", offset={offset})" if offset is not None else ")"
        elif offset is not None:
            detail = f"{detail} (offset={offset})"
        super().__init__(detail)
        self.path = str(path) if path is not None else None
        self.offset = offset
