"""Evaluation paths, pure-pursuit conversion of a path into twist commands, and path-tracking error metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Literal

import numpy as np
import pydantic

from .autodiff import wrap_angle_array
from .envsim import CONTROL_DT, rotate
from .errors import PathError, ShapeError
from .helpers import did_you_mean

if TYPE_CHECKING:
    from collections.abc import Callable

    import numpy.typing as npt

    Array = npt.NDArray[np.float64]

_logger = logging.getLogger('worldwalk.pathcmd')

PathKind = Literal['oblong', 'lemniscate', 'u_shape', 'star']
MAX_SPACING = 0.05
_ARC_STEP = 0.002
# arc-length window searched around the progress hint, behind and ahead of it
_HINT_WINDOW = (0.5, 1.5)


class PursuitConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra='forbid')

    lookahead: float = 0.6
    speed: float = 0.9
    omega_limit: float = 1.5

    @pydantic.field_validator('lookahead', 'omega_limit')
    @classmethod
    def check_positive(cls, value: float, info: pydantic.ValidationInfo) -> float:
        if not value > 0:
            raise ValueError(f'{info.field_name} must be positive')
        return value

    @pydantic.field_validator('speed')
    @classmethod
    def check_speed(cls, value: float) -> float:
        if not 0 <= value <= 1.5:  # noqa: PLR2004
            raise ValueError('speed must lie in [0, 1.5] m/s')
        return value


@dataclass(frozen=True)
class Path:
    """A densified polyline with an arc-length table; closed paths wrap from the last point back to the first."""

    kind: str
    points: Array
    closed: bool

    def __post_init__(self) -> None:
        if self.points.ndim != 2 or self.points.shape[1] != 2 or self.points.shape[0] < 2:  # noqa: PLR2004
            raise PathError(f'a path needs at least two 2D points, got shape {self.points.shape}')
        if np.any(np.linalg.norm(np.diff(self._vertices, axis=0), axis=1) <= 0):
            raise PathError('consecutive waypoints must be distinct')

    @cached_property
    def _vertices(self) -> Array:
        """Segment endpoints, with the first point repeated at the end of a closed path."""
        return np.vstack([self.points, self.points[:1]]) if self.closed else self.points

    @cached_property
    def arc(self) -> Array:
        """Cumulative arc length at every vertex of :attr:`_vertices`."""
        return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(self._vertices, axis=0), axis=1))])

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    @property
    def spacing(self) -> float:
        return float(np.max(np.diff(self.arc)))

    def _clamp_arc(self, s: Array | float) -> Array:
        s = np.asarray(s, dtype=np.float64)
        return np.mod(s, self.length) if self.closed else np.clip(s, 0.0, self.length)

    def point_at(self, s: Array | float) -> Array:
        """World position at arc length ``s``; closed paths wrap, open paths clamp to their ends."""
        s = self._clamp_arc(s)
        vertices = self._vertices
        return np.stack([np.interp(s, self.arc, vertices[:, 0]), np.interp(s, self.arc, vertices[:, 1])], -1)

    def heading_at(self, s: float) -> float:
        s = float(self._clamp_arc(s))
        segment = min(int(np.searchsorted(self.arc, s, side='right')) - 1, len(self.arc) - 2)
        dx, dy = self._vertices[segment + 1] - self._vertices[segment]
        return math.atan2(dy, dx)

    def start_pose(self) -> Array:
        x, y = self.points[0]
        return np.array([x, y, self.heading_at(0.0)])

    def project(self, point: Array, hint: float | None = None) -> float:
        """Arc length of the point on the path nearest to ``point``.

        With a ``hint`` (the previous progress), only segments within a short arc window around it are searched, so
        the projection cannot jump to another branch where the path crosses itself.
        """
        start, end = self._vertices[:-1], self._vertices[1:]
        direction = end - start
        seg_length_sq = np.sum(direction**2, axis=1)
        t = np.clip(np.sum((point - start) * direction, axis=1) / seg_length_sq, 0.0, 1.0)
        distance = np.linalg.norm(start + t[:, None] * direction - point, axis=1)
        if hint is not None:
            offset = self.arc[:-1] - hint
            if self.closed:
                offset = np.mod(offset + self.length / 2, self.length) - self.length / 2
            behind, ahead = _HINT_WINDOW
            distance = np.where((offset >= -behind - self.spacing) & (offset <= ahead), distance, np.inf)
        segment = int(np.argmin(distance))
        return float(self.arc[segment] + t[segment] * math.sqrt(seg_length_sq[segment]))

    def transformed(self, offset: Array, angle: float) -> Path:
        return Path(self.kind, rotate(self.points, angle) + np.asarray(offset, dtype=np.float64), self.closed)

    def to_json(self) -> str:
        return json.dumps({'kind': self.kind, 'closed': self.closed, 'points': self.points.tolist()})


def _fillet_polyline(vertices: Array, radius: float, *, closed: bool) -> Array:
    """Replace every interior corner (every corner of a closed polygon) by a circular arc of ``radius``."""
    count = len(vertices)
    corners = range(count) if closed else range(1, count - 1)
    dense: list[Array] = [] if closed else [vertices[:1]]
    for i in corners:
        previous, corner, following = vertices[i - 1], vertices[i], vertices[(i + 1) % count]
        incoming = (corner - previous) / np.linalg.norm(corner - previous)
        outgoing = (following - corner) / np.linalg.norm(following - corner)
        turn = math.atan2(
            incoming[0] * outgoing[1] - incoming[1] * outgoing[0], float(np.dot(incoming, outgoing)),
        )
        if abs(turn) < 1e-12:
            dense.append(corner[None])
            continue
        tangent = radius * math.tan(abs(turn) / 2)
        entry = corner - incoming * tangent
        side = 1.0 if turn > 0 else -1.0
        center = entry + side * radius * np.array([-incoming[1], incoming[0]])
        start_angle = math.atan2(entry[1] - center[1], entry[0] - center[0])
        samples = max(int(math.ceil(abs(turn) * radius / _ARC_STEP)), 2)
        angles = start_angle + np.linspace(0.0, turn, samples)
        dense.append(center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1))
    if not closed:
        dense.append(vertices[-1:])
    return np.vstack(dense)


def _resample(points: Array, *, closed: bool, spacing: float = MAX_SPACING) -> Array:
    vertices = np.vstack([points, points[:1]]) if closed else points
    steps = np.linalg.norm(np.diff(vertices, axis=0), axis=1)
    keep = np.concatenate([[True], steps > 1e-12])
    vertices = vertices[keep]
    arc = np.concatenate([[0.0], np.cumsum(steps[steps > 1e-12])])
    count = int(math.ceil(arc[-1] / spacing))
    targets = np.linspace(0.0, arc[-1], count + 1)
    if closed:
        targets = targets[:-1]
    return np.stack([np.interp(targets, arc, vertices[:, 0]), np.interp(targets, arc, vertices[:, 1])], axis=1)


def _signed_area(points: Array) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _start_leftmost_ccw(points: Array) -> Array:
    if _signed_area(points) < 0:
        points = points[::-1]
    return np.roll(points, -int(np.argmin(points[:, 0])), axis=0)


def _oblong() -> tuple[Array, bool]:
    rectangle = np.array([[0.0, 0.0], [5.0, 0.0], [5.0, 2.0], [0.0, 2.0]])
    return _start_leftmost_ccw(_fillet_polyline(rectangle, 1.0, closed=True)), True


def _u_shape() -> tuple[Array, bool]:
    corners = np.array([[0.0, 3.5], [0.0, 0.0], [4.0, 0.0], [4.0, 3.5]])
    return _fillet_polyline(corners, 0.5, closed=False), False


def _star() -> tuple[Array, bool]:
    angles = math.pi / 2 + np.arange(10) * math.pi / 5
    radii = np.where(np.arange(10) % 2 == 0, 2.0, 1.6)
    vertices = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    return _start_leftmost_ccw(_fillet_polyline(vertices, 0.2, closed=True)), True


def _lemniscate() -> tuple[Array, bool]:
    # starts at the leftmost point and runs the left lobe counterclockwise
    half_width = 2.0
    t = np.linspace(math.pi, 3 * math.pi, 20000, endpoint=False)
    denominator = 1.0 + np.sin(t) ** 2
    x = half_width * np.cos(t) / denominator
    y = -half_width * np.sin(t) * np.cos(t) / denominator
    return np.stack([x, y], axis=1), True


_SHAPES: dict[str, Callable[[], tuple[Array, bool]]] = {
    'oblong': _oblong,
    'lemniscate': _lemniscate,
    'u_shape': _u_shape,
    'star': _star,
}
PATH_KINDS = tuple(_SHAPES)


def make_path(kind: str, scale: float = 1.0) -> Path:
    """Build one of the evaluation paths, resampled to uniform spacing of at most 5 cm.

    :param kind: ``oblong``, ``lemniscate``, ``u_shape`` or ``star``.
    :param scale: Uniform scale factor applied to the default geometry.
    :raises PathError: For an unknown kind or a non-positive scale.
    """
    if kind not in _SHAPES:
        raise PathError(f'unknown path kind {kind!r}{did_you_mean(kind, _SHAPES)}')
    if not scale > 0:
        raise PathError(f'path scale must be positive, got {scale}')
    points, closed = _SHAPES[kind]()
    return Path(kind, _resample(points * scale, closed=closed), closed)


@dataclass(frozen=True)
class PursuitResult:
    command: Array
    progress: float
    done: bool = False


def pure_pursuit(pose: Array, path: Path, cfg: PursuitConfig, progress: float | None = None) -> PursuitResult:
    """Steer toward the path point one lookahead distance of arc length past the nearest point.

    :param pose: ``(x, y, heading)`` in the world frame.
    :param progress: The previous result's progress, used as a search hint for the nearest point.
    :return: The command ``(v, w)``, the new progress and, on an open path, whether its end has been reached (the
        command is then zero).
    """
    if cfg.lookahead <= path.spacing:
        raise PathError(f'lookahead {cfg.lookahead} must exceed the waypoint spacing {path.spacing:.3f}')
    pose = np.asarray(pose, dtype=np.float64)
    nearest = path.project(pose[0:2], progress)
    if not path.closed and nearest >= path.length - path.spacing:
        return PursuitResult(np.zeros(2), nearest, done=True)

    target = path.point_at(nearest + cfg.lookahead)
    local_y = float(rotate(target - pose[0:2], -pose[2])[1])
    curvature = 2.0 * local_y / cfg.lookahead**2
    omega = float(np.clip(curvature * cfg.speed, -cfg.omega_limit, cfg.omega_limit))
    return PursuitResult(np.array([cfg.speed, omega]), nearest)


@dataclass(frozen=True)
class PathMetrics:
    e_v: float
    e_omega: float
    e_p: float

    def as_row(self) -> dict[str, float]:
        return {'e_v': self.e_v, 'e_omega': self.e_omega, 'e_p': self.e_p}


def reference_positions(path: Path, target_speed: float, steps: int, dt: float = CONTROL_DT) -> Array:
    """Where an ideal follower moving at ``target_speed`` along the path is after each of ``steps`` periods."""
    return path.point_at(target_speed * dt * np.arange(1, steps + 1))


def metrics(
    states: Array,
    commands: Array,
    path: Path,
    target_speed: float,
    dt: float = CONTROL_DT,
) -> PathMetrics:
    """Mean absolute velocity and yaw-rate errors against the commands, and mean distance to the ideal follower.

    :param states: ``(T + 1, width)`` trajectory states; measurements are taken from ``states[1:]``.
    :param commands: ``(T, 2)`` commanded ``(v, w)``.
    """
    steps = commands.shape[0]
    if states.shape[0] != steps + 1 or steps == 0:
        raise ShapeError('metrics', f'{states.shape[0]} states do not match {steps} commands')
    measured = states[1:]
    e_v = float(np.mean(np.abs(commands[:, 0] - measured[:, 3])))
    e_omega = float(np.mean(np.abs(commands[:, 1] - measured[:, 5])))
    e_p = float(np.mean(np.linalg.norm(measured[:, 0:2] - reference_positions(path, target_speed, steps, dt), axis=1)))
    return PathMetrics(e_v, e_omega, e_p)


def unicycle_rollout(path: Path, cfg: PursuitConfig, steps: int, dt: float = CONTROL_DT) -> tuple[Array, Array]:
    """Drive a kinematic unicycle that executes every pursuit command exactly.

    :return: States ``(T + 1, 6)`` laid out as ``[x, y, heading, v, 0, w]`` and commands ``(T, 2)``; stops early at
        the end of an open path.
    """
    pose = path.start_pose()
    states = [np.array([*pose, 0.0, 0.0, 0.0])]
    commands = []
    progress = 0.0
    for _ in range(steps):
        result = pure_pursuit(pose, path, cfg, progress)
        if result.done:
            break
        progress = result.progress
        speed, omega = result.command
        heading = float(wrap_angle_array(pose[2] + omega * dt))
        pose = np.array([pose[0] + speed * math.cos(heading) * dt, pose[1] + speed * math.sin(heading) * dt, heading])
        states.append(np.array([*pose, speed, 0.0, omega]))
        commands.append(result.command)
    _logger.debug(f'Unicycle covered {len(commands)} steps on the {path.kind} path')
    return np.array(states), np.array(commands).reshape(-1, 2)
