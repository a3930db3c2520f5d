from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import pydantic

from .envsim import Trajectory
from .errors import InsufficientDataError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator
    from pathlib import Path

    import numpy.typing as npt

    Array = npt.NDArray[np.float64]

_logger = logging.getLogger('worldwalk.buffer')

BUFFER_FORMAT = 1


@dataclass
class Segments:
    """A batch of aligned trajectory windows; ``commands`` rows are NaN where the source trajectory had none."""

    states: Array
    actions: Array
    commands: Array

    def __len__(self) -> int:
        return self.states.shape[0]


class _TrajectoryRecord(pydantic.BaseModel):
    states: list[list[float]]
    actions: list[list[float]]
    commands: list[list[float]] | None = None
    truncated: bool = False


class _BufferDocument(pydantic.BaseModel):
    format_version: int
    capacity: int | None = None
    trajectories: list[_TrajectoryRecord]

    @pydantic.field_validator('format_version')
    @classmethod
    def check_version(cls, value: int) -> int:
        if value != BUFFER_FORMAT:
            raise ValueError(f'unsupported replay buffer format {value}')
        return value


class ReplayBuffer:
    """Whole trajectories in insertion order, evicted oldest-first once the transition count exceeds ``capacity``.

    Segments are windows of consecutive transitions inside one trajectory, so no sample ever spans two rollouts.
    """

    def __init__(self, capacity: int | None = None) -> None:
        if capacity is not None and capacity < 1:
            raise ValueError('capacity must be positive')
        self.capacity = capacity
        self._trajectories: deque[Trajectory] = deque()
        self._transitions = 0
        self.insertions = 0

    def __repr__(self) -> str:
        return f'{self.__class__.__name__}({len(self._trajectories)} trajectories, {self._transitions} transitions)'

    def __len__(self) -> int:
        return self._transitions

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self._trajectories)

    @property
    def trajectory_count(self) -> int:
        return len(self._trajectories)

    def add(self, trajectory: Trajectory) -> None:
        if self._trajectories and trajectory.states.shape[1] != self._trajectories[0].states.shape[1]:
            raise ShapeError('ReplayBuffer', 'trajectory state width differs from the buffered data')
        self._trajectories.append(trajectory)
        self._transitions += len(trajectory)
        self.insertions += 1
        while self.capacity is not None and self._transitions > self.capacity and len(self._trajectories) > 1:
            evicted = self._trajectories.popleft()
            self._transitions -= len(evicted)
            _logger.debug(f'Evicted a trajectory of {len(evicted)} transitions')

    def extend(self, trajectories: Iterable[Trajectory]) -> None:
        for trajectory in trajectories:
            self.add(trajectory)

    def _segment_counts(self, length: int) -> Array:
        return np.array([max(len(trajectory) - length + 1, 0) for trajectory in self._trajectories], dtype=np.int64)

    def count_segments(self, length: int) -> int:
        """Number of distinct ``length``-transition windows that fit inside single trajectories."""
        return int(self._segment_counts(length).sum())

    def require_segments(self, batch_size: int, length: int) -> None:
        available = self.count_segments(length)
        if available < batch_size:
            raise InsufficientDataError(f'{length + 1}-state segments', batch_size, available)

    def segment_index(self, flat: int, length: int) -> tuple[int, int]:
        """Map a flat segment number to ``(trajectory index, start step)``."""
        offsets = np.cumsum(self._segment_counts(length))
        trajectory = int(np.searchsorted(offsets, flat, side='right'))
        start = flat - (int(offsets[trajectory - 1]) if trajectory else 0)
        return trajectory, start

    def sample_segments(self, batch_size: int, length: int, rng: np.random.Generator) -> Segments:
        """Draw ``batch_size`` windows of ``length`` transitions uniformly over all valid starts, with replacement."""
        self.require_segments(batch_size, length)
        counts = self._segment_counts(length)
        offsets = np.cumsum(counts)
        flat = rng.integers(0, int(offsets[-1]), size=batch_size)
        trajectories = np.searchsorted(offsets, flat, side='right')
        starts = flat - np.concatenate([[0], offsets[:-1]])[trajectories]

        first = self._trajectories[0]
        states = np.empty((batch_size, length + 1, first.states.shape[1]))
        actions = np.empty((batch_size, length, first.actions.shape[1]))
        commands = np.full((batch_size, length, 2), np.nan)
        for row, (index, start) in enumerate(zip(trajectories, starts, strict=True)):
            trajectory = self._trajectories[int(index)]
            states[row] = trajectory.states[start:start + length + 1]
            actions[row] = trajectory.actions[start:start + length]
            if trajectory.commands is not None:
                commands[row] = trajectory.commands[start:start + length]
        return Segments(states, actions, commands)

    def transitions(self) -> tuple[Array, Array, Array]:
        """All transitions stacked as ``(states, actions, next_states)``."""
        if not self._trajectories:
            raise InsufficientDataError('transitions', 1, 0)
        return (
            np.concatenate([trajectory.states[:-1] for trajectory in self._trajectories]),
            np.concatenate([trajectory.actions for trajectory in self._trajectories]),
            np.concatenate([trajectory.states[1:] for trajectory in self._trajectories]),
        )

    def to_json(self) -> str:
        document = _BufferDocument(
            format_version=BUFFER_FORMAT,
            capacity=self.capacity,
            trajectories=[
                _TrajectoryRecord(
                    states=trajectory.states.tolist(),
                    actions=trajectory.actions.tolist(),
                    commands=None if trajectory.commands is None else trajectory.commands.tolist(),
                    truncated=trajectory.truncated,
                )
                for trajectory in self._trajectories
            ],
        )
        return document.model_dump_json()

    @classmethod
    def from_json(cls, text: str) -> ReplayBuffer:
        document = _BufferDocument.model_validate_json(text)
        buffer = cls(document.capacity)
        for record in document.trajectories:
            buffer.add(Trajectory(
                states=np.asarray(record.states, dtype=np.float64),
                actions=np.asarray(record.actions, dtype=np.float64),
                commands=None if record.commands is None else np.asarray(record.commands, dtype=np.float64),
                truncated=record.truncated,
            ))
        return buffer

    def save(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding='utf-8')
        _logger.info(f'Saved {self._transitions} transitions to {path.as_posix()}')
        return path

    @classmethod
    def load(cls, path: Path) -> ReplayBuffer:
        return cls.from_json(path.read_text(encoding='utf-8'))

    @classmethod
    def merge(cls, buffers: Iterable[ReplayBuffer], capacity: int | None = None) -> ReplayBuffer:
        merged = cls(capacity)
        for buffer in buffers:
            merged.extend(buffer)
        return merged
