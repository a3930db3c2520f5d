"""Deterministic planar quadruped surrogate: PD-driven joints, a gait-to-twist coupling and a kinematic base.

States are flat float64 vectors laid out as ``[x, y, heading, vx, vy, yaw_rate, joint_pos(J), joint_vel(J),
prev_action(J)]``; batches stack them row-wise. :class:`RobotState` is the named view used at API boundaries.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Protocol

import numpy as np
import pydantic

from .autodiff import wrap_angle_array
from .errors import NonFiniteError, OutOfRangeError, ShapeError

if TYPE_CHECKING:
    from pathlib import Path

    import numpy.typing as npt

    Array = npt.NDArray[np.float64]

_logger = logging.getLogger('worldwalk.envsim')

CONTROL_DT = 0.02
CONTROL_PERIOD_MS = CONTROL_DT * 1000
ACTION_LIMIT = math.pi / 2
NOMINAL_MASS = 5.74
MAX_GAIT_SPEED = 1.5
MAX_GAIT_TURN = 1.5
REFERENCE_WARMUP = 1.0


class PhysicalParams(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra='forbid')

    mass: float = NOMINAL_MASS
    kp: float = 50.0
    control_latency: float = 0.0
    max_torque: float = 18.0

    @pydantic.field_validator('mass', 'kp', 'max_torque')
    @classmethod
    def check_positive(cls, value: float, info: pydantic.ValidationInfo) -> float:
        if not value > 0:
            raise ValueError(f'{info.field_name} must be positive')
        return value

    @pydantic.field_validator('control_latency')
    @classmethod
    def check_latency(cls, value: float) -> float:
        if not 0 <= value < CONTROL_PERIOD_MS:
            raise ValueError(f'control_latency must lie in [0, {CONTROL_PERIOD_MS:g}) ms')
        return value

    @property
    def latency_blend(self) -> float:
        return min(max(self.control_latency / CONTROL_PERIOD_MS, 0.0), 1.0)

    @property
    def joint_inertia(self) -> float:
        return 0.05 * self.mass / NOMINAL_MASS

    @property
    def twist_time_constant(self) -> float:
        return 0.1 * self.mass / NOMINAL_MASS


ENVIRONMENTS: dict[str, PhysicalParams] = {
    'original': PhysicalParams(),
    'env1': PhysicalParams(mass=14.0, kp=40.0, control_latency=6.0, max_torque=16.2),
    'env2': PhysicalParams(mass=NOMINAL_MASS + 3.0, control_latency=6.0),
    'env3': PhysicalParams(mass=NOMINAL_MASS + 5.0, control_latency=6.0),
    'env4': PhysicalParams(mass=NOMINAL_MASS + 7.0, control_latency=6.0),
}


@dataclass(frozen=True)
class StateLayout:
    """Index arithmetic for the flat state vector of a robot with ``joints`` actuated joints."""

    joints: int = 8

    def __post_init__(self) -> None:
        if self.joints < 2 or self.joints % 2:  # noqa: PLR2004
            raise ShapeError('StateLayout', f'joint count must be even and at least 2, got {self.joints}')

    @property
    def size(self) -> int:
        return 6 + 3 * self.joints

    @property
    def model_size(self) -> int:
        """Width of the state predicted by the world model (everything but the latency buffer)."""
        return 6 + 2 * self.joints

    @property
    def observation_size(self) -> int:
        return 3 + 2 * self.joints

    @property
    def observation(self) -> slice:
        return slice(3, self.model_size)

    @property
    def joint_pos(self) -> slice:
        return slice(6, 6 + self.joints)

    @property
    def joint_vel(self) -> slice:
        return slice(6 + self.joints, self.model_size)

    @property
    def prev_action(self) -> slice:
        return slice(self.model_size, self.size)

    def field_names(self) -> list[str]:
        names = ['x', 'y', 'heading', 'vx', 'vy', 'yaw_rate']
        for group in ('joint_pos', 'joint_vel', 'prev_action'):
            names.extend(f'{group}[{i}]' for i in range(self.joints))
        return names

    @cached_property
    def mixing(self) -> Array:
        index = np.arange(self.joints)
        return np.stack([
            np.full(self.joints, 0.04),
            np.where(index % 2 == 0, 0.02, -0.02),
            np.where(index < self.joints / 2, 0.03, -0.03),
        ])

    @classmethod
    def from_width(cls, width: int) -> StateLayout:
        joints, remainder = divmod(width - 6, 3)
        if remainder or joints < 1:
            raise ShapeError('StateLayout', f'{width} is not a valid state width')
        return cls(joints)


@dataclass(frozen=True)
class RobotState:
    position: Array
    heading: float
    body_velocity: Array
    yaw_rate: float
    joint_pos: Array
    joint_vel: Array
    prev_action: Array

    @classmethod
    def zero(cls, joints: int = 8) -> RobotState:
        return cls.from_vector(np.zeros(StateLayout(joints).size))

    @classmethod
    def from_vector(cls, vector: Array) -> RobotState:
        vector = np.asarray(vector, dtype=np.float64)
        layout = StateLayout.from_width(vector.shape[-1])
        return cls(
            position=vector[0:2].copy(),
            heading=float(vector[2]),
            body_velocity=vector[3:5].copy(),
            yaw_rate=float(vector[5]),
            joint_pos=vector[layout.joint_pos].copy(),
            joint_vel=vector[layout.joint_vel].copy(),
            prev_action=vector[layout.prev_action].copy(),
        )

    def to_vector(self) -> Array:
        return np.concatenate([
            self.position, [self.heading], self.body_velocity, [self.yaw_rate],
            self.joint_pos, self.joint_vel, self.prev_action,
        ]).astype(np.float64)


def rotate(vectors: Array, angle: Array | float) -> Array:
    """Rotate row vectors ``(..., 2)`` counterclockwise by ``angle`` (broadcast over the leading axes)."""
    cos, sin = np.cos(angle), np.sin(angle)
    x, y = vectors[..., 0], vectors[..., 1]
    return np.stack([cos * x - sin * y, sin * x + cos * y], axis=-1)


def transform_pose(states: Array, offset: Array, angle: float) -> Array:
    """Apply the rigid motion "rotate by ``angle`` about the origin, then translate by ``offset``" to world poses."""
    moved = np.array(states, dtype=np.float64, copy=True)
    moved[..., 0:2] = rotate(moved[..., 0:2], angle) + np.asarray(offset, dtype=np.float64)
    moved[..., 2] = wrap_angle_array(moved[..., 2] + angle)
    return moved


def relative_pose(states: Array, origin: Array) -> Array:
    """Express world poses of ``states`` in the frame of the pose ``(x, y, heading)`` given by ``origin``."""
    origin = np.asarray(origin, dtype=np.float64)
    relative = np.array(states, dtype=np.float64, copy=True)
    relative[..., 0:2] = rotate(relative[..., 0:2] - origin[..., None, 0:2], -origin[..., None, 2])
    relative[..., 2] = wrap_angle_array(relative[..., 2] - origin[..., None, 2])
    return relative


def step_batch(states: Array, actions: Array, params: PhysicalParams, *, substeps: int = 4) -> Array:
    """Advance a batch of states by one 20 ms control period.

    The PD loop is integrated in ``substeps`` equal sub-intervals; the gait coupling and base integration run once
    per period on the resulting joint state. ``substeps=1`` integrates the joints once per period.

    :param states: ``(batch, 6 + 3J)`` state vectors.
    :param actions: ``(batch, J)`` target joint angles, clamped to the joint limit before use.
    :param params: Physical parameters of the environment.
    :raises NonFiniteError: If a state or action contains NaN or infinity.
    """
    if substeps < 1:
        raise OutOfRangeError('substeps', substeps, 1, math.inf)
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    layout = StateLayout.from_width(states.shape[1])
    if actions.shape != (states.shape[0], layout.joints):
        raise ShapeError('step', f'expected actions of shape {(states.shape[0], layout.joints)}, got {actions.shape}')
    if not np.all(np.isfinite(states)):
        raise NonFiniteError('state')
    if not np.all(np.isfinite(actions)):
        raise NonFiniteError('action')

    action = np.clip(actions, -ACTION_LIMIT, ACTION_LIMIT)
    blend = params.latency_blend
    target = (1.0 - blend) * action + blend * states[:, layout.prev_action]

    joint_pos = states[:, layout.joint_pos].copy()
    joint_vel = states[:, layout.joint_vel].copy()
    damping = params.kp / 10.0
    h = CONTROL_DT / substeps
    for _ in range(substeps):
        torque = np.clip(params.kp * (target - joint_pos) - damping * joint_vel, -params.max_torque, params.max_torque)
        joint_vel = joint_vel + torque / params.joint_inertia * h
        joint_pos = joint_pos + joint_vel * h

    gait = np.abs(joint_vel) * np.cos(joint_pos)
    twist_target = gait @ layout.mixing.T
    twist = states[:, 3:6]
    twist = twist + (twist_target - twist) * (CONTROL_DT / params.twist_time_constant)

    heading = wrap_angle_array(states[:, 2] + twist[:, 2] * CONTROL_DT)
    position = states[:, 0:2] + rotate(twist[:, 0:2], heading) * CONTROL_DT

    return np.concatenate([position, heading[:, None], twist, joint_pos, joint_vel, action], axis=1)


def step(state: RobotState, action: Array, params: PhysicalParams, *, substeps: int = 4) -> RobotState:
    actions = np.asarray(action, dtype=np.float64)[None]
    next_state = step_batch(state.to_vector()[None], actions, params, substeps=substeps)
    return RobotState.from_vector(next_state[0])


def observe_batch(states: Array, layout: StateLayout) -> Array:
    """Observations of full or world-model state rows; both widths share the observation columns."""
    return np.asarray(states, dtype=np.float64)[..., layout.observation].copy()


def observe(state: RobotState) -> Array:
    """The frame-invariant observation: body velocity, yaw rate, joint positions and joint velocities."""
    vector = state.to_vector()
    return observe_batch(vector, StateLayout.from_width(vector.shape[0]))


class Controller(Protocol):
    def __call__(self, t: int, states: Array, rng: np.random.Generator) -> tuple[Array, Array | None]:
        """Return ``(actions, commands)`` for step ``t``; ``commands`` is ``None`` for controllers without one."""


@dataclass
class Trajectory:
    """One agent's rollout: ``T + 1`` full states, ``T`` actions and optionally ``T`` commands."""

    states: Array
    actions: Array
    commands: Array | None = None
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.states.shape[0] != self.actions.shape[0] + 1:
            raise ShapeError(
                'Trajectory', f'{self.states.shape[0]} states do not bracket {self.actions.shape[0]} actions',
            )
        if self.commands is not None and self.commands.shape[0] != self.actions.shape[0]:
            raise ShapeError('Trajectory', 'commands must align with actions')

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def observations(self) -> Array:
        return observe_batch(self.states, self.layout)

    @property
    def layout(self) -> StateLayout:
        return StateLayout.from_width(self.states.shape[1])


def rollout_batch(
    controller: Controller,
    initial: Array,
    params: PhysicalParams,
    steps: int,
    rng: np.random.Generator,
    *,
    substeps: int = 4,
) -> list[Trajectory]:
    """Roll every row of ``initial`` forward for ``steps`` control periods under ``controller``.

    Agents are stepped together and returned in agent order. If the controller produces a non-finite action, or a
    step produces a non-finite state, every trajectory is cut before that step and flagged as truncated.

    :raises NonFiniteError: If the initial state is non-finite, or the very first step already fails.
    """
    if steps < 1:
        raise OutOfRangeError('steps', steps, 1, math.inf)
    states = np.atleast_2d(np.asarray(initial, dtype=np.float64))
    batch, joints = states.shape[0], StateLayout.from_width(states.shape[1]).joints
    state_log = np.empty((steps + 1, batch, states.shape[1]))
    action_log = np.empty((steps, batch, joints))
    command_log: Array | None = None
    state_log[0] = states
    if not np.all(np.isfinite(states)):
        raise NonFiniteError('state', 'non-finite initial state')
    length, truncated, failed = steps, False, ''

    for t in range(steps):
        actions, commands = controller(t, states, rng)
        if not np.all(np.isfinite(actions)):
            failed = 'action'
        else:
            next_states = step_batch(states, actions, params, substeps=substeps)
            if not np.all(np.isfinite(next_states)):
                failed = 'state'
        if failed:
            _logger.warning(f'Non-finite {failed} at step {t}, truncating rollout')
            length, truncated = t, True
            break
        if commands is not None:
            if command_log is None:
                command_log = np.zeros((steps, batch, 2))
            command_log[t] = commands
        action_log[t] = actions
        states = next_states
        state_log[t + 1] = states

    if length == 0:
        raise NonFiniteError(failed, f'non-finite {failed} in the first step')
    return [
        Trajectory(
            states=state_log[:length + 1, agent].copy(),
            actions=action_log[:length, agent].copy(),
            commands=None if command_log is None else command_log[:length, agent].copy(),
            truncated=truncated,
        )
        for agent in range(batch)
    ]


def rollout(
    policy_fn: Controller,
    initial: RobotState,
    params: PhysicalParams,
    steps: int,
    rng_seed: int,
    *,
    substeps: int = 4,
) -> Trajectory:
    return rollout_batch(
        policy_fn, initial.to_vector()[None], params, steps, np.random.default_rng(rng_seed), substeps=substeps,
    )[0]


@dataclass
class ScriptedGait:
    """Open-loop sinusoidal gait; the left half of the joints gets the positive turn skew.

    The amplitude grows with ``speed`` (``speed / 3`` rad) so that a zero speed means standing still.
    """

    speed: float
    turn: float
    joints: int = 8
    noise: float = 0.0
    time_offset: Array | float = 0.0
    frequency: float = field(init=False)
    phases: Array = field(init=False)
    amplitudes: Array = field(init=False)

    def __post_init__(self) -> None:
        if not 0 <= self.speed <= MAX_GAIT_SPEED:
            raise OutOfRangeError('speed', self.speed, 0, MAX_GAIT_SPEED)
        if abs(self.turn) > MAX_GAIT_TURN:
            raise OutOfRangeError('turn', self.turn, -MAX_GAIT_TURN, MAX_GAIT_TURN)
        side = np.where(np.arange(self.joints) < self.joints / 2, 1.0, -1.0)
        self.frequency = 1.0 + self.speed
        self.phases = math.pi * np.arange(self.joints) / self.joints + side * 0.1 * self.turn
        self.amplitudes = self.speed / 3.0 * (1.0 + side * 0.2 * self.turn)

    def __call__(self, t: int, states: Array, rng: np.random.Generator) -> tuple[Array, None]:
        time = t * CONTROL_DT + np.reshape(self.time_offset, (-1, 1))
        actions = self.amplitudes * np.sin(2 * math.pi * self.frequency * time + self.phases)
        actions = np.broadcast_to(actions, (states.shape[0], self.joints)).copy()
        if self.noise:
            actions += rng.uniform(-self.noise, self.noise, size=actions.shape)
        return actions, None


@dataclass
class ReferenceClip:
    """Full states recorded at the control rate, tagged with the nominal gait that produced them."""

    frames: Array
    speed: float
    turn: float = 0.0
    dt: float = CONTROL_DT

    def __post_init__(self) -> None:
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if self.frames.shape[0] == 0:
            raise ShapeError('ReferenceClip', 'a clip needs at least one frame')
        StateLayout.from_width(self.frames.shape[1])

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def layout(self) -> StateLayout:
        return StateLayout.from_width(self.frames.shape[1])

    def to_json(self) -> str:
        return json.dumps({
            'dt': self.dt,
            'speed': self.speed,
            'turn': self.turn,
            'frames': self.frames.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> ReferenceClip:
        document = json.loads(text)
        return cls(
            frames=np.asarray(document['frames'], dtype=np.float64),
            speed=float(document['speed']),
            turn=float(document.get('turn', 0.0)),
            dt=float(document.get('dt', CONTROL_DT)),
        )

    def save(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding='utf-8')
        return path

    @classmethod
    def load(cls, path: Path) -> ReferenceClip:
        return cls.from_json(path.read_text(encoding='utf-8'))


def scripted_gait_reference(
    speed: float,
    turn: float,
    duration: float,
    params: PhysicalParams | None = None,
    *,
    joints: int = 8,
    warmup: float = REFERENCE_WARMUP,
    substeps: int = 4,
) -> ReferenceClip:
    """Record a reference clip by running the scripted gait on the surrogate.

    The gait first runs for ``warmup`` seconds so the clip holds the steady gait; the recording is then re-anchored
    so the first frame sits at the origin facing along +x.

    :param duration: Clip length in seconds; ``duration / 0.02`` frames are recorded.
    :param params: Physical parameters, the original environment by default.
    :raises OutOfRangeError: If ``speed`` is outside [0, 1.5] or ``|turn|`` exceeds 1.5.
    """
    params = params or ENVIRONMENTS['original']
    gait = ScriptedGait(speed, turn, joints)
    frame_count = round(duration / CONTROL_DT)
    warmup_steps = round(warmup / CONTROL_DT)
    if frame_count < 1:
        raise OutOfRangeError('duration', duration, CONTROL_DT, math.inf)

    states = np.zeros((1, StateLayout(joints).size))
    frames = np.empty((frame_count, states.shape[1]))
    rng = np.random.default_rng(0)
    for t in range(warmup_steps + frame_count):
        if t >= warmup_steps:
            frames[t - warmup_steps] = states[0]
        actions, _ = gait(t, states, rng)
        states = step_batch(states, actions, params, substeps=substeps)

    frames = relative_pose(frames, frames[0, 0:3])
    _logger.debug(f'Recorded {frame_count} reference frames at speed {speed} and turn {turn}')
    return ReferenceClip(frames=frames, speed=speed, turn=turn)
