"""
Exception hierarchy for the motion diffusion engine.
The CLI maps the grouping classes to exit codes.
"""

from typing import Any, Dict, Optional


class MageError(Exception):
    """Base class for every error raised by the services package."""


class InvalidArgument(MageError):
    pass


class ConfigError(MageError):
    pass


class SkeletonConfigError(ConfigError):
    pass


class DataError(MageError):
    """Problems with motion data: lengths, shapes on disk, degenerate values."""


class DegenerateInput(DataError):
    pass


class ClipTooShort(DataError):
    pass


class EmptyDataset(DataError):
    pass


class LengthMismatch(DataError):
    pass


class DataFormatError(DataError):
    pass


class ShapeMismatch(MageError):
    pass


class NonFiniteValue(MageError):
    pass


class NotScalarLoss(MageError):
    pass


class NonFiniteLoss(MageError):
    """Training produced a NaN/Inf loss. Carries the diagnostics of the failing step."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(MageError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class ConfigMismatch(CheckpointError):
    pass
