from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from pathlib import Path


class WorldwalkError(Exception):
    pass


class ShapeError(WorldwalkError, ValueError):
    """Raised when tensor shapes do not chain, naming the layer or op that rejected them."""

    def __init__(self, where: str, message: str) -> None:
        super().__init__(f'{where}: {message}')
        self.where = where


class GraphError(WorldwalkError):
    pass


class NonFiniteError(WorldwalkError, FloatingPointError):
    """Raised when a NaN or infinity shows up in a named parameter, gradient or state field."""

    def __init__(self, name: str, message: str = 'non-finite value') -> None:
        super().__init__(f'{message} in {name!r}')
        self.name = name


class InsufficientDataError(WorldwalkError):
    def __init__(self, what: str, required: int, available: int) -> None:
        super().__init__(f'not enough {what}: required {required}, available {available}')
        self.required = required
        self.available = available


class ClipTooShortError(WorldwalkError):
    pass


class MissingSnapshotError(WorldwalkError):
    pass


class TrainingDivergedError(WorldwalkError):
    """Raised when a training loss turns non-finite; ``checkpoint`` points at the last good state on disk."""

    def __init__(self, message: str, checkpoint: Path | None = None) -> None:
        suffix = f' (last good checkpoint: {checkpoint.as_posix()})' if checkpoint is not None else ''
        super().__init__(message + suffix)
        self.checkpoint = checkpoint


class SampleAccountingError(WorldwalkError):
    def __init__(self, phase: str, consumed: int, expected: int) -> None:
        super().__init__(f'{phase} consumed {consumed} samples, expected {expected}')
        self.consumed = consumed
        self.expected = expected


class PathError(WorldwalkError, ValueError):
    pass


class ConfigError(WorldwalkError):
    pass


class CheckpointError(WorldwalkError):
    pass


class OutOfRangeError(WorldwalkError, ValueError):
    def __init__(self, name: str, value: float, low: float, high: float) -> None:
        super().__init__(f'{name}={value} is outside [{low}, {high}]')
        self.name = name


class GradientCheckError(WorldwalkError):
    pass
