"""Training loops: co-training of world model and motion-tracking policy, command-following training, and the
online and off-policy fine-tuning loops under perturbed physics.

Every iteration collects environment data, then updates the world model, then updates the policy against the
refreshed world model.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Any

import numpy as np

from .autodiff import ParamStore, Tensor, adam_step, backward
from .buffer import ReplayBuffer
from .checkpoint import Architecture, Checkpoint, save_checkpoint
from .envsim import (
    CONTROL_DT,
    ENVIRONMENTS,
    MAX_GAIT_SPEED,
    MAX_GAIT_TURN,
    REFERENCE_WARMUP,
    ScriptedGait,
    StateLayout,
    rollout_batch,
    scripted_gait_reference,
)
from .errors import (
    ClipTooShortError,
    InsufficientDataError,
    NonFiniteError,
    SampleAccountingError,
    TrainingDivergedError,
)
from .helpers import write_csv
from .pathcmd import PathMetrics, make_path, metrics, pure_pursuit, reference_positions
from .vaepolicy import DECODER, DECODER_SNAPSHOT, VAEPolicy, tracking_loss
from .worldmodel import WorldModel

if TYPE_CHECKING:
    from collections.abc import Callable, Iterator, Sequence
    from pathlib import Path

    import numpy.typing as npt

    from .config import RunConfig
    from .envsim import PhysicalParams, ReferenceClip, Trajectory
    from .pathcmd import Path as TrackPath
    from .pathcmd import PursuitConfig
    from .vaepolicy import PolicyLoss

    Array = npt.NDArray[np.float64]

_logger = logging.getLogger('worldwalk.trainer')

_PHASE_STREAMS = {'init': 0, 'mt-scratch': 1, 'mt-finetune': 2, 'cf-scratch': 3, 'finetune': 4, 'offpolicy': 5}
_RNG_STREAMS = {'init': 0, 'collect': 1, 'world': 2, 'policy': 3, 'eval': 4}

MT_HEADER = ('iteration', 'samples_total', 'world_loss', 'mt_loss', 'reward', 'kl', 'reg_loss', 'env_reward')
CF_HEADER = (
    'iteration', 'samples_total', 'world_loss', 'cf_loss', 'reg_loss', 'e_v', 'e_omega', 'e_p', 'env_cf_loss',
)
TRAJECTORY_HEADER = (
    'step', 'time', 'x', 'y', 'heading', 'vx', 'vy', 'yaw_rate', 'v_cmd', 'omega_cmd', 'ref_x', 'ref_y',
)


@dataclass
class Session:
    """The mutable training state shared by all phases: parameters, architectures and counters."""

    layout: StateLayout
    store: ParamStore
    world_model: WorldModel
    policy: VAEPolicy
    seed: int
    phase: str = 'init'
    iteration: int = 0
    samples_total: int = 0

    @classmethod
    def create(cls, config: RunConfig) -> Session:
        layout = config.env.layout
        world_model = WorldModel(layout, config.nets.world_hidden)
        policy = VAEPolicy(layout, config.policy_config())
        store = ParamStore()
        rng = np.random.default_rng([config.seed, _PHASE_STREAMS['init'], 0, _RNG_STREAMS['init']])
        world_model.init_params(store, rng)
        policy.init_params(store, rng)
        _logger.debug(f'Initialized {store}')
        return cls(layout, store, world_model, policy, config.seed)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, config: RunConfig) -> Session:
        """Rebuild a session; the checkpoint's architecture wins over the configured one."""
        arch = checkpoint.architecture
        configured = config.nets
        if (arch.world_hidden, arch.policy_hidden, arch.latent_dim, arch.window) != (
            configured.world_hidden, configured.policy_hidden, configured.latent_dim, configured.window,
        ):
            _logger.warning('Configured network sizes differ from the checkpoint; using the checkpoint architecture')
        layout = StateLayout(arch.joints)
        world_model = WorldModel(layout, arch.world_hidden)
        world_model.load_state_dict(checkpoint.normalization)
        policy = VAEPolicy(layout, replace(
            config.policy_config(),
            hidden=tuple(arch.policy_hidden),
            latent_dim=arch.latent_dim,
            sigma=arch.sigma,
            window=arch.window,
        ))
        session = cls(
            layout, ParamStore(), world_model, policy, config.seed,
            phase=checkpoint.phase, iteration=checkpoint.iteration, samples_total=checkpoint.samples_total,
        )
        with_snapshot = f'{DECODER_SNAPSHOT}.w0' in checkpoint.tensors
        session.store = checkpoint.to_store(session.expected_shapes(with_snapshot=with_snapshot))
        return session

    @property
    def architecture(self) -> Architecture:
        return Architecture(
            joints=self.layout.joints,
            world_hidden=list(self.world_model.spec.sizes[1:-1]),
            policy_hidden=list(self.policy.config.hidden),
            latent_dim=self.policy.config.latent_dim,
            sigma=self.policy.config.sigma,
            window=self.policy.config.window,
        )

    def expected_shapes(self, *, with_snapshot: bool = False) -> dict[str, tuple[int, ...]]:
        specs = {'world': self.world_model.spec, **self.policy.specs}
        if with_snapshot:
            specs[DECODER_SNAPSHOT] = self.policy.specs[DECODER]
        shapes: dict[str, tuple[int, ...]] = {}
        for prefix, spec in specs.items():
            for i, (n_in, n_out) in enumerate(spec.layers()):
                shapes[f'{prefix}.w{i}'] = (n_in, n_out)
                shapes[f'{prefix}.b{i}'] = (n_out,)
        return shapes

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint.from_store(
            self.store,
            phase=self.phase,
            iteration=self.iteration,
            seed=self.seed,
            architecture=self.architecture,
            normalization=self.world_model.state_dict(),
            samples_total=self.samples_total,
        )

    def rng(self, stream: str) -> np.random.Generator:
        """A generator determined by the seed, the phase, the iteration and the stream name."""
        return np.random.default_rng([self.seed, _PHASE_STREAMS[self.phase], self.iteration, _RNG_STREAMS[stream]])

    def begin_phase(self, phase: str) -> None:
        self.phase = phase
        self.iteration = 0
        self.samples_total = 0


@dataclass
class TrainResult:
    session: Session
    history: list[dict[str, Any]]
    buffer: ReplayBuffer
    checkpoint: Path | None = None
    csv: Path | None = None


@dataclass
class EvalResult:
    """An evaluation rollout on a path: states, pursuit commands, the ideal follower's positions and the metrics."""

    states: Array
    commands: Array
    reference: Array
    metrics: PathMetrics
    env_cf_loss: float

    def as_row(self) -> dict[str, float]:
        return {**self.metrics.as_row(), 'env_cf_loss': self.env_cf_loss}

    def trajectory_rows(self) -> list[tuple[float, ...]]:
        """One row per control step in :data:`TRAJECTORY_HEADER` order, measured after the step."""
        return [
            (t + 1, round((t + 1) * CONTROL_DT, 6), *state[0:6], *command, *reference)
            for t, (state, command, reference) in enumerate(zip(
                self.states[1:], self.commands, self.reference, strict=True,
            ))
        ]


def reference_library(config: RunConfig) -> list[ReferenceClip]:
    """Scripted-gait clips for every configured speed and turn, recorded at the original physical parameters."""
    clips = [
        scripted_gait_reference(
            speed, turn, config.train.clip_duration, ENVIRONMENTS['original'],
            joints=config.env.joints, substeps=config.env.substeps,
        )
        for speed in config.train.clip_speeds
        for turn in config.train.clip_turns
    ]
    _logger.info(f'Generated {len(clips)} reference clips')
    return clips


def random_hold_schedule(
    steps: int,
    agents: int,
    hold_min: float,
    hold_max: float,
    rng: np.random.Generator,
) -> Array:
    """Per-agent piecewise-constant commands, each held for a uniformly drawn duration in ``[hold_min, hold_max]``."""
    schedule = np.empty((steps, agents, 2))
    for agent in range(agents):
        t = 0
        while t < steps:
            hold = max(round(rng.uniform(hold_min, hold_max) / CONTROL_DT), 1)
            schedule[t:t + hold, agent] = (rng.uniform(0.0, MAX_GAIT_SPEED), rng.uniform(-MAX_GAIT_TURN, MAX_GAIT_TURN))
            t += hold
    return schedule


class HoldCommands:
    def __init__(self, schedule: Array) -> None:
        self.schedule = schedule

    def __call__(self, t: int, states: Array) -> Array:
        return self.schedule[t]


class PursuitCommands:
    """Pure-pursuit commands for every agent, each with its own progress along the path."""

    def __init__(self, path: TrackPath, pursuit: PursuitConfig, agents: int) -> None:
        self.path = path
        self.pursuit = pursuit
        self.progress = [0.0] * agents

    def __call__(self, t: int, states: Array) -> Array:
        commands = np.empty((states.shape[0], 2))
        for agent, state in enumerate(states):
            result = pure_pursuit(state[0:3], self.path, self.pursuit, self.progress[agent])
            self.progress[agent] = result.progress
            commands[agent] = result.command
        return commands


class TrackingController:
    """Motion-tracking policy driving each agent along its own reference clip from its own start frame."""

    def __init__(
        self,
        policy: VAEPolicy,
        store: ParamStore,
        clips: Sequence[ReferenceClip],
        assignments: Sequence[tuple[int, int]],
        *,
        sample: bool,
    ) -> None:
        self.policy = policy
        self.store = store
        self.clips = clips
        self.assignments = assignments
        self.sample = sample

    def references(self, t: int) -> Array:
        window, width = self.policy.config.window, self.policy.layout.model_size
        return np.stack([
            self.clips[clip].frames[start + t + 1:start + t + 1 + window, :width]
            for clip, start in self.assignments
        ])

    def __call__(self, t: int, states: Array, rng: np.random.Generator) -> tuple[Array, None]:
        references = self.references(t)
        if self.sample:
            return self.policy.sample_mt(self.store, states, references, rng), None
        return self.policy.act_mt(self.store, states, references), None


class CommandController:
    def __init__(
        self,
        policy: VAEPolicy,
        store: ParamStore,
        commands: Callable[[int, Array], Array],
        *,
        sample: bool,
    ) -> None:
        self.policy = policy
        self.store = store
        self.commands = commands
        self.sample = sample

    def __call__(self, t: int, states: Array, rng: np.random.Generator) -> tuple[Array, Array]:
        commands = self.commands(t, states)
        if self.sample:
            return self.policy.sample_cf(self.store, states, commands, rng), commands
        return self.policy.act_cf(self.store, states, commands), commands


def _episode_lengths(samples: int, episode_length: int) -> list[int]:
    full, remainder = divmod(samples, episode_length)
    return [episode_length] * full + ([remainder] if remainder else [])


def _pick_clip_start(
    clips: Sequence[ReferenceClip],
    steps: int,
    window: int,
    rng: np.random.Generator,
) -> tuple[int, int]:
    clip = int(rng.integers(len(clips)))
    last_start = len(clips[clip]) - steps - window
    if last_start < 0:
        raise ClipTooShortError(f'clip {clip} has {len(clips[clip])} frames, an episode needs {steps + window}')
    return clip, int(rng.integers(0, last_start + 1))


def collect_tracking(
    session: Session,
    config: RunConfig,
    env_params: PhysicalParams,
    clips: Sequence[ReferenceClip],
    rng: np.random.Generator,
    *,
    bootstrap: bool,
) -> list[Trajectory]:
    """Collect ``samples`` steps per agent, tracking randomly chosen clip segments.

    With ``bootstrap`` the noisy scripted gait that produced each clip acts instead of the policy, phase-aligned to
    the clip's start frame.
    """
    train, window = config.train, session.policy.config.window
    trajectories: list[Trajectory] = []
    for steps in _episode_lengths(train.samples, train.episode_length):
        assignments = [_pick_clip_start(clips, steps, window, rng) for _ in range(train.agents)]
        initial = np.stack([clips[clip].frames[start] for clip, start in assignments])
        if not bootstrap:
            controller = TrackingController(session.policy, session.store, clips, assignments, sample=True)
            trajectories.extend(rollout_batch(
                controller, initial, env_params, steps, rng, substeps=config.env.substeps,
            ))
            continue
        for agent, (clip, start) in enumerate(assignments):
            gait = ScriptedGait(
                clips[clip].speed, clips[clip].turn, session.layout.joints,
                noise=train.bootstrap_noise,
                time_offset=(round(REFERENCE_WARMUP / CONTROL_DT) + start) * CONTROL_DT,
            )
            trajectories.extend(rollout_batch(
                gait, initial[agent:agent + 1], env_params, steps, rng, substeps=config.env.substeps,
            ))
    return trajectories


def _initial_command_states(session: Session, agents: int, path: TrackPath | None) -> Array:
    initial = np.zeros((agents, session.layout.size))
    if path is not None:
        initial[:, 0:3] = path.start_pose()
    return initial


def collect_commands(
    session: Session,
    config: RunConfig,
    env_params: PhysicalParams,
    rng: np.random.Generator,
) -> list[Trajectory]:
    """Collect ``samples`` steps per agent under the command-following policy with sampled latents.

    Commands are random holds, or pure pursuit of the configured path when ``train.commands`` is ``path``.
    """
    train = config.train
    path = make_path(config.path.kind, config.path.scale) if train.commands == 'path' else None
    trajectories: list[Trajectory] = []
    for steps in _episode_lengths(train.samples, train.episode_length):
        if path is None:
            source = HoldCommands(random_hold_schedule(steps, train.agents, train.hold_min, train.hold_max, rng))
        else:
            source = PursuitCommands(path, config.path.pursuit(), train.agents)
        controller = CommandController(session.policy, session.store, source, sample=True)
        initial = _initial_command_states(session, train.agents, path)
        trajectories.extend(rollout_batch(controller, initial, env_params, steps, rng, substeps=config.env.substeps))
    return trajectories


def evaluate_path(
    session: Session,
    env_params: PhysicalParams,
    path: TrackPath,
    pursuit: PursuitConfig,
    duration: float,
    *,
    substeps: int = 4,
) -> EvalResult:
    """Follow ``path`` with pure-pursuit commands and the mean latent; returns the tracking metrics.

    ``env_cf_loss`` is the per-step command-following loss measured on the environment's own states.
    """
    steps = round(duration / CONTROL_DT)
    controller = CommandController(session.policy, session.store, PursuitCommands(path, pursuit, 1), sample=False)
    initial = _initial_command_states(session, 1, path)
    trajectory = rollout_batch(
        controller, initial, env_params, steps, np.random.default_rng(session.seed), substeps=substeps,
    )[0]
    measured = trajectory.states[1:]
    velocity_error = np.abs(trajectory.commands[:, 0] - measured[:, 3])
    yaw_error = np.abs(trajectory.commands[:, 1] - measured[:, 5])
    env_cf_loss = float(np.mean(2.0 * (1.0 - np.exp(-2.0 * velocity_error)) + (1.0 - np.exp(-2.0 * yaw_error))))
    return EvalResult(
        states=trajectory.states,
        commands=trajectory.commands,
        reference=reference_positions(path, pursuit.speed, len(trajectory)),
        metrics=metrics(trajectory.states, trajectory.commands, path, pursuit.speed),
        env_cf_loss=env_cf_loss,
    )


def evaluate_tracking(
    session: Session,
    env_params: PhysicalParams,
    clips: Sequence[ReferenceClip],
    duration: float,
    *,
    substeps: int = 4,
) -> float:
    """Mean ``1 - L^T`` of the mean-latent tracking policy over every clip, measured on the environment."""
    window = session.policy.config.window
    steps = min(round(duration / CONTROL_DT), min(len(clip) for clip in clips) - window - 1)
    if steps < 1:
        raise ClipTooShortError('reference clips are too short to evaluate tracking')
    assignments = [(index, 0) for index in range(len(clips))]
    controller = TrackingController(session.policy, session.store, clips, assignments, sample=False)
    initial = np.stack([clip.frames[0] for clip in clips])
    trajectories = rollout_batch(
        controller, initial, env_params, steps, np.random.default_rng(session.seed), substeps=substeps,
    )
    losses = []
    for trajectory, clip in zip(trajectories, clips, strict=True):
        length = len(trajectory)
        terms = tracking_loss(Tensor(trajectory.states[1:length + 1]), clip.frames[1:length + 1], session.layout)
        losses.append(float(terms.total.data.mean()))
    return 1.0 - float(np.mean(losses))


def tracking_batch(
    session: Session,
    config: RunConfig,
    clips: Sequence[ReferenceClip],
    rng: np.random.Generator,
) -> tuple[Array, Array]:
    """Start states (clip frames with perturbed joints) and the reference frames for one motion-tracking update."""
    width, window, rollout = session.layout.model_size, session.policy.config.window, config.train.rollout
    layout, noise = session.layout, config.train.start_noise
    starts, references = [], []
    for _ in range(config.train.batch_size):
        clip, start = _pick_clip_start(clips, rollout, window, rng)
        state = clips[clip].frames[start, :width].copy()
        state[layout.joint_pos] += rng.normal(0.0, noise, layout.joints)
        state[layout.joint_vel] += rng.normal(0.0, 10.0 * noise, layout.joints)
        starts.append(state)
        references.append(clips[clip].frames[start + 1:start + rollout + window, :width])
    return np.stack(starts), np.stack(references)


def command_batch(
    buffer: ReplayBuffer,
    config: RunConfig,
    rng: np.random.Generator,
) -> tuple[Array, Array]:
    """Start states and commands for one command-following update, from buffered segments.

    Segments from trajectories without recorded commands get a random command held over the whole segment.
    """
    segments = buffer.sample_segments(config.train.batch_size, config.train.rollout, rng)
    commands = segments.commands
    missing = np.isnan(commands[:, 0, 0])
    if np.any(missing):
        count = int(missing.sum())
        speeds = rng.uniform(0.0, MAX_GAIT_SPEED, count)
        turns = rng.uniform(-MAX_GAIT_TURN, MAX_GAIT_TURN, count)
        commands[missing] = np.stack([speeds, turns], axis=1)[:, None, :]
    return segments.states[:, 0], commands


def update_policy(
    session: Session,
    names: Sequence[str],
    n_updates: int,
    lr: float,
    loss_fn: Callable[[dict[str, Tensor], np.random.Generator], PolicyLoss],
) -> dict[str, float]:
    """Run ``n_updates`` Adam steps on the policy parameters ``names``; returns per-step means over the updates."""
    rng = session.rng('policy')
    totals: dict[str, float] = {}
    for _ in range(n_updates):
        bound = session.store.bind(names)
        result = loss_fn(bound, rng)
        adam_step(session.store, backward(result.loss, {name: bound[name] for name in names}), lr)
        totals['loss'] = totals.get('loss', 0.0) + result.per_step
        for key, value in result.components.items():
            totals[key] = totals.get(key, 0.0) + value
    return {key: value / n_updates for key, value in totals.items()} if n_updates else {}


class _PhaseRunner:
    """Bookkeeping of one training phase: history rows, CSV output, checkpoints and divergence handling."""

    def __init__(self, session: Session, config: RunConfig, phase: str, header: Sequence[str]) -> None:
        self.session = session
        self.config = config
        self.phase = phase
        self.header = header
        self.history: list[dict[str, Any]] = []
        self.output_dir = config.output_path
        self.last_checkpoint: Path | None = None
        self.csv_path = self.output_dir / f'{phase}.csv'
        session.begin_phase(phase)

    @contextmanager
    def iteration(self, iteration: int) -> Iterator[None]:
        if self.last_checkpoint is None:
            self.last_checkpoint = self._save_last()
        self.session.iteration = iteration
        try:
            yield
        except (NonFiniteError, FloatingPointError) as error:
            message = f'{self.phase} diverged in iteration {iteration}: {error}'
            _logger.error(message)
            raise TrainingDivergedError(message, self.last_checkpoint) from error

    def record(self, row: dict[str, Any]) -> None:
        row = {column: '' if row.get(column) is None else row[column] for column in self.header}
        self.history.append(row)
        summary = ', '.join(
            f'{column}={value:.4f}' if isinstance(value, float) else f'{column}={value}'
            for column, value in row.items() if value != ''
        )
        _logger.info(f'[{self.phase}] {summary}')
        write_csv(self.csv_path, self.header, self.history)
        self.last_checkpoint = self._save_last()

    def _save_last(self) -> Path:
        path = self.output_dir / 'checkpoints' / f'{self.phase}.last.json'
        return save_checkpoint(path, self.session.to_checkpoint())

    def finish(self, buffer: ReplayBuffer, expected_samples: int | None = None) -> TrainResult:
        if expected_samples is not None and self.session.samples_total != expected_samples:
            raise SampleAccountingError(self.phase, self.session.samples_total, expected_samples)
        checkpoint = save_checkpoint(
            self.output_dir / 'checkpoints' / f'{self.phase}.json', self.session.to_checkpoint(),
        )
        _logger.info(f'{self.phase} finished after {self.session.iteration} iterations: {checkpoint.as_posix()}')
        return TrainResult(self.session, self.history, buffer, checkpoint, self.csv_path)


def _collect_into(buffer: ReplayBuffer, session: Session, trajectories: list[Trajectory]) -> None:
    buffer.extend(trajectories)
    session.samples_total += sum(len(trajectory) for trajectory in trajectories)


def _fit_world(session: Session, config: RunConfig, buffer: ReplayBuffer, n_updates: int) -> float | None:
    train = config.train
    loss = session.world_model.train(
        session.store, buffer, n_updates, train.batch_size, train.rollout, train.world_lr, session.rng('world'),
    )
    return None if loss is None else loss / train.rollout


def _tracking_iterations(
    session: Session,
    config: RunConfig,
    env_params: PhysicalParams,
    clips: Sequence[ReferenceClip],
    runner: _PhaseRunner,
    *,
    bootstrap_first: bool,
    include_reg: bool,
) -> ReplayBuffer:
    train = config.train
    buffer = ReplayBuffer(train.buffer_capacity)
    names = session.policy.trainable(runner.phase)

    def loss_fn(bound: dict[str, Tensor], rng: np.random.Generator) -> PolicyLoss:
        starts, references = tracking_batch(session, config, clips, rng)
        return session.policy.mt_policy_loss(
            bound, session.world_model, starts, references, rng, include_reg=include_reg,
        )

    for iteration in range(1, train.iterations + 1):
        with runner.iteration(iteration):
            bootstrap = bootstrap_first and iteration == 1
            _collect_into(buffer, session, collect_tracking(
                session, config, env_params, clips, session.rng('collect'), bootstrap=bootstrap,
            ))
            world_loss = _fit_world(session, config, buffer, train.world_updates)
            policy = update_policy(session, names, train.policy_updates, train.policy_lr, loss_fn)
            env_reward = evaluate_tracking(
                session, env_params, clips, train.eval_duration, substeps=config.env.substeps,
            )
        runner.record({
            'iteration': iteration,
            'samples_total': session.samples_total,
            'world_loss': world_loss,
            'mt_loss': policy.get('loss'),
            'reward': policy.get('reward'),
            'kl': policy.get('kl'),
            'reg_loss': policy.get('reg') if include_reg else None,
            'env_reward': env_reward,
        })
    return buffer


def co_train_mt(
    config: RunConfig,
    env_params: PhysicalParams | None = None,
    clips: Sequence[ReferenceClip] | None = None,
    *,
    session: Session | None = None,
) -> TrainResult:
    """Iterative co-training of the world model and the motion-tracking policy from scratch.

    The first iteration collects data with the noisy scripted gait, since an untrained policy produces degenerate
    data. ``iterations = 0`` saves the initialized state unchanged.
    """
    session = session or Session.create(config)
    env_params = env_params or config.env.physical_params()
    clips = list(clips) if clips is not None else reference_library(config)
    runner = _PhaseRunner(session, config, 'mt-scratch', MT_HEADER)
    buffer = _tracking_iterations(
        session, config, env_params, clips, runner, bootstrap_first=True, include_reg=False,
    )
    return runner.finish(buffer, config.train.iterations * config.train.samples * config.train.agents)


def fine_tune_mt(
    config: RunConfig,
    env_params: PhysicalParams,
    session: Session,
    clips: Sequence[ReferenceClip] | None = None,
) -> TrainResult:
    """Continue motion-tracking co-training under perturbed physics, with the decoder regularizer.

    Records the pre-adaptation tracking reward as iteration 0.
    """
    clips = list(clips) if clips is not None else reference_library(config)
    runner = _PhaseRunner(session, config, 'mt-finetune', MT_HEADER)
    if not session.policy.has_snapshot(session.store):
        session.policy.snapshot_decoder(session.store)
    with runner.iteration(0):
        env_reward = evaluate_tracking(
            session, env_params, clips, config.train.eval_duration, substeps=config.env.substeps,
        )
    runner.record({'iteration': 0, 'samples_total': 0, 'env_reward': env_reward})
    buffer = _tracking_iterations(
        session, config, env_params, clips, runner, bootstrap_first=False, include_reg=True,
    )
    return runner.finish(buffer, config.train.iterations * config.train.samples * config.train.agents)


def _command_iterations(
    session: Session,
    config: RunConfig,
    env_params: PhysicalParams,
    runner: _PhaseRunner,
    buffer: ReplayBuffer,
    *,
    collect: bool,
    include_reg: bool,
) -> None:
    train = config.train
    names = session.policy.trainable(runner.phase)
    path = make_path(config.path.kind, config.path.scale)

    def loss_fn(bound: dict[str, Tensor], rng: np.random.Generator) -> PolicyLoss:
        starts, commands = command_batch(buffer, config, rng)
        return session.policy.cf_policy_loss(bound, session.world_model, starts, commands, rng, include_reg=include_reg)

    def evaluate() -> EvalResult:
        return evaluate_path(
            session, env_params, path, config.path.pursuit(), train.eval_duration, substeps=config.env.substeps,
        )

    if include_reg:
        with runner.iteration(0):
            before = evaluate()
        runner.record({'iteration': 0, 'samples_total': session.samples_total, **before.as_row()})

    for iteration in range(1, train.iterations + 1):
        with runner.iteration(iteration):
            world_loss = None
            if collect:
                _collect_into(buffer, session, collect_commands(session, config, env_params, session.rng('collect')))
                world_loss = _fit_world(session, config, buffer, train.world_updates)
            policy = update_policy(session, names, train.policy_updates, train.policy_lr, loss_fn)
            result = evaluate()
        runner.record({
            'iteration': iteration,
            'samples_total': session.samples_total,
            'world_loss': world_loss,
            'cf_loss': policy.get('cf'),
            'reg_loss': policy.get('reg') if include_reg else None,
            **result.as_row(),
        })


def train_cf(config: RunConfig, env_params: PhysicalParams | None, session: Session) -> TrainResult:
    """Train only the command-following encoder; the prior and the motor decoder stay frozen.

    The world model keeps being refreshed on the new command-following data every iteration.
    """
    env_params = env_params or config.env.physical_params()
    runner = _PhaseRunner(session, config, 'cf-scratch', CF_HEADER)
    buffer = ReplayBuffer(config.train.buffer_capacity)
    _command_iterations(session, config, env_params, runner, buffer, collect=True, include_reg=False)
    return runner.finish(buffer, config.train.iterations * config.train.samples * config.train.agents)


def fine_tune(
    config: RunConfig,
    env_params: PhysicalParams,
    session: Session,
    *,
    save_buffer: bool = True,
) -> TrainResult:
    """Online fine-tuning: deploy, collect, refit the world model, then update the CF encoder and motor decoder.

    A snapshot of the motor decoder is taken at entry unless the session already carries one, and the policy loss
    adds the weighted drift regularizer. Iteration 0 records the pre-adaptation metrics.
    """
    runner = _PhaseRunner(session, config, 'finetune', CF_HEADER)
    if not session.policy.has_snapshot(session.store):
        session.policy.snapshot_decoder(session.store)
    buffer = ReplayBuffer(config.train.buffer_capacity)
    _command_iterations(session, config, env_params, runner, buffer, collect=True, include_reg=True)
    if save_buffer and len(buffer):
        buffer.save(config.output_path / 'buffer.json')
    return runner.finish(buffer, config.train.iterations * config.train.samples * config.train.agents)


def off_policy_finetune(
    config: RunConfig,
    buffers: Sequence[ReplayBuffer],
    session: Session,
    env_params: PhysicalParams | None = None,
) -> TrainResult:
    """Fine-tune from stored data only: one world-model fit, then policy updates against it.

    The single fit uses the budget of ``world_updates`` per iteration for all iterations at once. ``env_params``
    only drives the evaluation rollouts.

    :raises InsufficientDataError: If the stored buffers hold no transitions.
    """
    env_params = env_params or config.env.physical_params()
    buffer = ReplayBuffer.merge(buffers)
    if not len(buffer):
        raise InsufficientDataError('stored transitions', 1, 0)
    runner = _PhaseRunner(session, config, 'offpolicy', CF_HEADER)
    if not session.policy.has_snapshot(session.store):
        session.policy.snapshot_decoder(session.store)
    with runner.iteration(0):
        world_loss = _fit_world(session, config, buffer, config.train.world_updates * max(config.train.iterations, 1))
    _logger.info(f'Fitted the world model to {len(buffer)} stored transitions, loss {world_loss}')
    _command_iterations(session, config, env_params, runner, buffer, collect=False, include_reg=True)
    return runner.finish(buffer, 0)

