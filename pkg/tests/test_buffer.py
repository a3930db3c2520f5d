from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pydantic
import pytest

from worldwalk.buffer import ReplayBuffer
from worldwalk.envsim import StateLayout, Trajectory
from worldwalk.errors import InsufficientDataError, ShapeError

if TYPE_CHECKING:
    from pathlib import Path


def _trajectory(layout: StateLayout, steps: int, offset: float = 0.0, *, commands: bool = False) -> Trajectory:
    states = np.arange((steps + 1) * layout.size, dtype=np.float64).reshape(steps + 1, layout.size) + offset
    actions = np.full((steps, layout.joints), offset)
    return Trajectory(states, actions, np.full((steps, 2), offset) if commands else None)


def test_trajectory_shape_checks(layout: StateLayout) -> None:
    with pytest.raises(ShapeError):
        Trajectory(np.zeros((3, layout.size)), np.zeros((3, layout.joints)))
    with pytest.raises(ShapeError):
        Trajectory(np.zeros((4, layout.size)), np.zeros((3, layout.joints)), np.zeros((2, 2)))


def test_capacity_evicts_oldest_trajectories(layout: StateLayout) -> None:
    buffer = ReplayBuffer(capacity=25)
    for index in range(4):
        buffer.add(_trajectory(layout, 10, offset=index))
    assert len(buffer) == 20
    assert buffer.trajectory_count == 2
    assert buffer.insertions == 4
    assert [trajectory.actions[0, 0] for trajectory in buffer] == [2.0, 3.0]


def test_oversized_trajectory_is_kept(layout: StateLayout) -> None:
    buffer = ReplayBuffer(capacity=5)
    buffer.add(_trajectory(layout, 10))
    assert len(buffer) == 10


def test_state_width_must_match(layout: StateLayout) -> None:
    buffer = ReplayBuffer()
    buffer.add(_trajectory(layout, 3))
    with pytest.raises(ShapeError):
        buffer.add(_trajectory(StateLayout(8), 3))


def test_segments_stay_inside_trajectories(layout: StateLayout, rng: np.random.Generator) -> None:
    buffer = ReplayBuffer()
    buffer.add(_trajectory(layout, 5, offset=0.0))
    buffer.add(_trajectory(layout, 3, offset=1000.0))
    assert buffer.count_segments(3) == 3 + 1
    assert buffer.segment_index(3, 3) == (1, 0)
    segments = buffer.sample_segments(200, 3, rng)
    assert segments.states.shape == (200, 4, layout.size)
    steps = np.diff(segments.states[:, :, 0], axis=1)
    np.testing.assert_array_equal(steps, layout.size)


def test_segments_fill_missing_commands_with_nan(layout: StateLayout, rng: np.random.Generator) -> None:
    buffer = ReplayBuffer()
    buffer.add(_trajectory(layout, 4, offset=0.0))
    buffer.add(_trajectory(layout, 4, offset=7.0, commands=True))
    segments = buffer.sample_segments(50, 2, rng)
    with_commands = segments.actions[:, 0, 0] == 7.0
    assert np.all(segments.commands[with_commands] == 7.0)
    assert np.all(np.isnan(segments.commands[~with_commands]))


def test_require_segments_reports_counts(layout: StateLayout, rng: np.random.Generator) -> None:
    buffer = ReplayBuffer()
    buffer.add(_trajectory(layout, 4))
    with pytest.raises(InsufficientDataError) as info:
        buffer.sample_segments(5, 4, rng)
    assert (info.value.required, info.value.available) == (5, 1)
    with pytest.raises(InsufficientDataError):
        ReplayBuffer().transitions()


def test_sampling_is_reproducible(layout: StateLayout) -> None:
    buffer = ReplayBuffer()
    buffer.extend(_trajectory(layout, 12, offset=index) for index in range(3))
    first = buffer.sample_segments(8, 2, np.random.default_rng(3))
    second = buffer.sample_segments(8, 2, np.random.default_rng(3))
    np.testing.assert_array_equal(first.states, second.states)


def test_transitions_stack_every_step(layout: StateLayout) -> None:
    buffer = ReplayBuffer()
    buffer.extend([_trajectory(layout, 3), _trajectory(layout, 2, offset=5.0)])
    states, actions, next_states = buffer.transitions()
    assert states.shape == next_states.shape == (5, layout.size)
    assert actions.shape == (5, layout.joints)
    np.testing.assert_array_equal(next_states[:3], next(iter(buffer)).states[1:])


def test_file_round_trip_and_merge(layout: StateLayout, tmp_path: Path) -> None:
    buffer = ReplayBuffer(capacity=100)
    buffer.add(_trajectory(layout, 4, commands=True))
    buffer.add(_trajectory(layout, 6, offset=0.5))
    loaded = ReplayBuffer.load(buffer.save(tmp_path / 'buffer.json'))
    assert loaded.capacity == 100
    assert len(loaded) == 10
    for original, restored in zip(buffer, loaded, strict=True):
        np.testing.assert_array_equal(original.states, restored.states)
        assert (original.commands is None) == (restored.commands is None)

    merged = ReplayBuffer.merge([buffer, loaded])
    assert merged.trajectory_count == 4
    assert len(merged) == 20


def test_unknown_format_is_rejected() -> None:
    with pytest.raises(pydantic.ValidationError):
        ReplayBuffer.from_json('{"format_version": 2, "trajectories": []}')
