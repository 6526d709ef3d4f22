"""
Spatial Forcing Lab - Exceptions

Error hierarchy shared by every sub-package.
"""
from typing import Optional


class SpatialForcingError(Exception):
    """Base class for all errors raised by the lab."""


class ShapeError(SpatialForcingError, ValueError):
    """Input shapes do not conform to an operation's rule."""

    def __init__(self, op_kind: str, *shapes: tuple, detail: str = ""):
        self.op_kind = op_kind
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        message = f"{op_kind}: shape mismatch {rendered}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class UnknownOpError(SpatialForcingError):
    """Requested op kind is not registered."""


class NotScalarError(SpatialForcingError):
    """A scalar was required (backward seed, grad_check objective)."""


class DegenerateBatchError(SpatialForcingError):
    """Batch statistics requested over a single sample."""


class NonFiniteError(SpatialForcingError):
    """NaN or infinity appeared in an activation or loss."""

    def __init__(
        self,
        message: str,
        layer: Optional[int] = None,
        iteration: Optional[int] = None,
    ):
        self.layer = layer
        self.iteration = iteration
        super().__init__(message)


class SceneGenerationError(SpatialForcingError):
    """Rejection sampling could not satisfy the scene constraints."""


class FormatError(SpatialForcingError):
    """Binary file could not be decoded."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """File was written by an unsupported format version."""


class UnexpectedEOFError(FormatError):
    """File ended in the middle of a record."""


class DatasetMismatchError(SpatialForcingError):
    """Dataset header disagrees with the experiment configuration."""


class ConfigError(SpatialForcingError):
    """Experiment configuration could not be parsed or validated."""


class InsufficientSamplesError(SpatialForcingError):
    """Too few samples for a probe or a diagnostic."""


class CsvFormatError(SpatialForcingError):
    """CSV input is malformed or empty."""


class StorageError(SpatialForcingError):
    """File could not be read or written."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
