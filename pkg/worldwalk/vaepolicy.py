"""Latent-variable control policy: a state-conditional prior, two residual encoders and a motor decoder.

The motion-tracking (MT) encoder conditions on a window of future reference frames, the command-following (CF)
encoder on a twist command. Both add their output to the prior mean. Policy losses are evaluated on rollouts of the
world model and differentiated end to end.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .autodiff import LayerSpec, Tensor, concat, forward_mlp, init_mlp, norm, wrap_angle
from .errors import ClipTooShortError, MissingSnapshotError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping

    import numpy.typing as npt

    from .autodiff import ParamStore
    from .envsim import StateLayout
    from .worldmodel import WorldModel

    Array = npt.NDArray[np.float64]

_logger = logging.getLogger('worldwalk.vaepolicy')

PRIOR = 'prior'
MT_ENCODER = 'mt'
CF_ENCODER = 'cf'
DECODER = 'decoder'
DECODER_SNAPSHOT = 'decoder_ori'

TRACKING_WEIGHTS = {'jpos': 0.6, 'jvel': 0.05, 'bpos': 0.3, 'bvel': 0.05}

# networks receiving gradients in each training phase; everything else stays frozen
TRAINABLE_NETWORKS: dict[str, tuple[str, ...]] = {
    'mt-scratch': (PRIOR, MT_ENCODER, DECODER),
    'mt-finetune': (PRIOR, MT_ENCODER, DECODER),
    'cf-scratch': (CF_ENCODER,),
    'finetune': (CF_ENCODER, DECODER),
    'offpolicy': (CF_ENCODER, DECODER),
}


@dataclass(frozen=True)
class PolicyConfig:
    hidden: tuple[int, ...] = (256, 256)
    latent_dim: int = 16
    sigma: float = 0.3
    window: int = 2
    kl_weight: float = 0.1
    reg_weight: float = 0.1

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError('sigma must be positive')
        if self.window < 1 or self.latent_dim < 1:
            raise ValueError('window and latent_dim must be at least 1')


@dataclass
class LatentDistribution:
    """Isotropic Gaussian ``N(mean, sigma^2 I)``; ``residual`` is the encoder's offset from the prior mean."""

    mean: Tensor
    sigma: float
    residual: Tensor | None = None


@dataclass
class TrackingTerms:
    total: Tensor
    components: dict[str, Tensor]


@dataclass
class PolicyLoss:
    """A scalar training loss (batch mean of per-rollout sums) and per-step mean values for logging."""

    loss: Tensor
    steps: int
    components: dict[str, float] = field(default_factory=dict)

    @property
    def per_step(self) -> float:
        return self.loss.item() / self.steps


def sample_latent(dist: LatentDistribution, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw ``mean + sigma * eps``, differentiable with respect to the mean."""
    noise = rng.standard_normal(dist.mean.shape)
    return dist.mean + dist.sigma * noise


def kl_loss(residual: Tensor, sigma: float) -> Tensor:
    """KL divergence between two Gaussians with equal isotropic covariance that differ by ``residual`` in mean."""
    return residual.square().sum(axis=1) * (1.0 / (2.0 * sigma**2))


def diagonal_gaussian_kl(mean_q: Array, std_q: Array, mean_p: Array, std_p: Array) -> float:
    """General ``KL(q || p)`` between diagonal Gaussians."""
    mean_q, std_q, mean_p, std_p = (np.asarray(value, dtype=np.float64) for value in (mean_q, std_q, mean_p, std_p))
    return float(np.sum(
        np.log(std_p / std_q) + (std_q**2 + (mean_q - mean_p) ** 2) / (2.0 * std_p**2) - 0.5,
    ))


def _saturating(exponent: Tensor) -> Tensor:
    return 1.0 - (-exponent).exp()


def tracking_loss(predicted: Tensor, reference: Array | Tensor, layout: StateLayout) -> TrackingTerms:
    """Per-row weighted tracking loss against a reference frame, both in the world frame.

    :param predicted: ``(batch, width)`` predicted states.
    :param reference: ``(batch, width)`` reference frames.
    :return: The weighted total (each row in [0, 1)) and the four unweighted components.
    """
    if not isinstance(reference, Tensor):
        reference = Tensor(reference)
    width = layout.model_size
    error = predicted[:, :width] - reference[:, :width]
    heading_error = wrap_angle(error[:, 2:3])
    components = {
        'jpos': _saturating(error[:, layout.joint_pos].square().sum(axis=1)),
        'jvel': _saturating(error[:, layout.joint_vel].square().sum(axis=1)),
        'bpos': _saturating(
            20.0 * error[:, 0:2].square().sum(axis=1) + 10.0 * heading_error.square().sum(axis=1),
        ),
        'bvel': _saturating(
            2.0 * error[:, 3:5].square().sum(axis=1) + 0.2 * error[:, 5:6].square().sum(axis=1),
        ),
    }
    total = sum((TRACKING_WEIGHTS[name] * value for name, value in components.items()), Tensor(0.0))
    return TrackingTerms(total, components)


def cf_loss(predicted: Tensor, commands: Array | Tensor) -> Tensor:
    """Per-row command-following loss ``2 L^v + L^w`` on body forward velocity and yaw rate, in [0, 3)."""
    if not isinstance(commands, Tensor):
        commands = Tensor(commands)
    velocity = _saturating(2.0 * (commands[:, 0] - predicted[:, 3]).abs())
    yaw = _saturating(2.0 * (commands[:, 1] - predicted[:, 5]).abs())
    return 2.0 * velocity + yaw


class VAEPolicy:
    """Architecture and loss evaluation of the four policy networks; parameters live in a shared ParamStore."""

    def __init__(self, layout: StateLayout, config: PolicyConfig | None = None) -> None:
        self.layout = layout
        self.config = config or PolicyConfig()
        obs, latent, hidden = layout.observation_size, self.config.latent_dim, self.config.hidden
        self.specs = {
            PRIOR: LayerSpec.build(obs, hidden, latent),
            MT_ENCODER: LayerSpec.build(obs + self.config.window * layout.model_size, hidden, latent),
            CF_ENCODER: LayerSpec.build(obs + 2, hidden, latent),
            DECODER: LayerSpec.build(obs + latent, hidden, layout.joints),
        }

    def __repr__(self) -> str:
        return f'{self.__class__.__name__}(joints={self.layout.joints}, config={self.config})'

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        """Initialize all four networks; the CF encoder starts at zero so a fresh CF posterior equals the prior."""
        for name, spec in self.specs.items():
            init_mlp(store, name, spec, rng, output_scale=0.0 if name == CF_ENCODER else 1.0)

    def param_names(self, networks: Iterable[str]) -> list[str]:
        return [name for network in networks for name in self.specs[network].param_names(network)]

    def trainable(self, phase: str) -> list[str]:
        return self.param_names(TRAINABLE_NETWORKS[phase])

    def snapshot_decoder(self, store: ParamStore) -> None:
        """Freeze a copy of the current motor decoder for the drift regularizer."""
        store.copy_network(DECODER, DECODER_SNAPSHOT)
        _logger.debug('Took a snapshot of the motor decoder')

    @staticmethod
    def has_snapshot(store: ParamStore) -> bool:
        return bool(store.names(DECODER_SNAPSHOT))

    def observation(self, state: Tensor) -> Tensor:
        return state[:, self.layout.observation]

    def prior_mean(self, params: Mapping[str, Tensor], observation: Tensor) -> Tensor:
        return forward_mlp(params, PRIOR, observation, self.specs[PRIOR])

    def posterior_mt(self, params: Mapping[str, Tensor], observation: Tensor, window: Tensor) -> LatentDistribution:
        residual = forward_mlp(params, MT_ENCODER, concat([observation, window], axis=1), self.specs[MT_ENCODER])
        return LatentDistribution(self.prior_mean(params, observation) + residual, self.config.sigma, residual)

    def posterior_cf(self, params: Mapping[str, Tensor], observation: Tensor, command: Tensor) -> LatentDistribution:
        residual = forward_mlp(params, CF_ENCODER, concat([observation, command], axis=1), self.specs[CF_ENCODER])
        return LatentDistribution(self.prior_mean(params, observation) + residual, self.config.sigma, residual)

    def decode(
        self,
        params: Mapping[str, Tensor],
        observation: Tensor,
        latent: Tensor,
        *,
        network: str = DECODER,
    ) -> Tensor:
        """Joint targets bounded to the joint limit by a scaled tanh."""
        raw = forward_mlp(params, network, concat([observation, latent], axis=1), self.specs[DECODER])
        return raw.tanh() * (math.pi / 2)

    def reg_loss(self, params: Mapping[str, Tensor], observation: Tensor, latent: Tensor) -> Tensor:
        """Per-row L2 distance between the snapshot decoder's and the current decoder's actions.

        :raises MissingSnapshotError: If no decoder snapshot has been taken.
        """
        if f'{DECODER_SNAPSHOT}.w0' not in params:
            raise MissingSnapshotError('the decoder regularizer needs a snapshot of the original decoder')
        original = self.decode(params, observation, latent, network=DECODER_SNAPSHOT)
        return norm(original - self.decode(params, observation, latent), axis=1)

    def reference_window(self, state: Tensor, references: Array) -> Tensor:
        """Encode reference frames relative to the current pose; differentiable with respect to ``state``.

        :param state: ``(batch, width)`` current states.
        :param references: ``(batch, K, width)`` world-frame reference frames.
        """
        width = self.layout.model_size
        if references.ndim != 3 or references.shape[1] != self.config.window:  # noqa: PLR2004
            raise ShapeError('reference window', f'expected {self.config.window} frames, got shape {references.shape}')
        heading = state[:, 2:3]
        cos, sin = heading.cos(), heading.sin()
        frames = []
        for k in range(self.config.window):
            frame = references[:, k, :width]
            dx = frame[:, 0:1] - state[:, 0:1]
            dy = frame[:, 1:2] - state[:, 1:2]
            frames.extend([
                cos * dx + sin * dy,
                cos * dy - sin * dx,
                wrap_angle(frame[:, 2:3] - heading),
                Tensor(frame[:, 3:width]),
            ])
        return concat(frames, axis=1)

    def mt_policy_loss(
        self,
        params: Mapping[str, Tensor],
        world_model: WorldModel,
        start_states: Array,
        references: Array,
        rng: np.random.Generator,
        *,
        include_reg: bool = False,
    ) -> PolicyLoss:
        """Tracking loss plus weighted KL summed over an n-step world-model unroll.

        :param start_states: ``(batch, width)`` initial states.
        :param references: ``(batch, n + K - 1, width)`` world-frame reference frames; entry ``t`` is the target for
            the state reached after step ``t``.
        :param include_reg: Add the weighted decoder regularizer, which needs a decoder snapshot.
        """
        window = self.config.window
        steps = references.shape[1] - window + 1
        if steps < 1:
            raise ClipTooShortError(f'{references.shape[1]} reference frames cannot feed a window of {window}')
        state = Tensor(start_states[:, :self.layout.model_size])
        total: Tensor | None = None
        sums = dict.fromkeys(('tracking', 'kl', 'reg', *TRACKING_WEIGHTS), 0.0)
        for t in range(steps):
            observation = self.observation(state)
            dist = self.posterior_mt(params, observation, self.reference_window(state, references[:, t:t + window]))
            latent = sample_latent(dist, rng)
            action = self.decode(params, observation, latent)
            reg = self.reg_loss(params, observation, latent) if include_reg else None
            state = world_model.predict(params, state, action)
            tracking = tracking_loss(state, references[:, t], self.layout)
            divergence = kl_loss(dist.residual, self.config.sigma)
            step_loss = tracking.total + self.config.kl_weight * divergence
            if reg is not None:
                step_loss = step_loss + self.config.reg_weight * reg
                sums['reg'] += float(reg.data.mean())
            total = step_loss if total is None else total + step_loss
            sums['tracking'] += float(tracking.total.data.mean())
            sums['kl'] += float(divergence.data.mean())
            for name, value in tracking.components.items():
                sums[name] += float(value.data.mean())
        components = {name: value / steps for name, value in sums.items()}
        components['reward'] = 1.0 - components['tracking']
        return PolicyLoss(total.mean(), steps, components)

    def cf_policy_loss(
        self,
        params: Mapping[str, Tensor],
        world_model: WorldModel,
        start_states: Array,
        commands: Array,
        rng: np.random.Generator,
        *,
        include_reg: bool = False,
    ) -> PolicyLoss:
        """Command-following loss, plus the weighted decoder regularizer when ``include_reg``, over an n-step unroll.

        :param commands: ``(batch, n, 2)`` commands ``(v, w)``, one per step.
        """
        steps = commands.shape[1]
        if steps < 1:
            raise ClipTooShortError('a command-following unroll needs at least one command')
        state = Tensor(start_states[:, :self.layout.model_size])
        total: Tensor | None = None
        sums = {'cf': 0.0, 'reg': 0.0}
        for t in range(steps):
            observation = self.observation(state)
            command = Tensor(commands[:, t])
            latent = sample_latent(self.posterior_cf(params, observation, command), rng)
            action = self.decode(params, observation, latent)
            reg = self.reg_loss(params, observation, latent) if include_reg else None
            state = world_model.predict(params, state, action)
            step_loss = cf_loss(state, command)
            sums['cf'] += float(step_loss.data.mean())
            if reg is not None:
                step_loss = step_loss + self.config.reg_weight * reg
                sums['reg'] += float(reg.data.mean())
            total = step_loss if total is None else total + step_loss
        return PolicyLoss(total.mean(), steps, {name: value / steps for name, value in sums.items()})

    def act_mt(self, store: ParamStore, states: Array, references: Array, *, use_prior: bool = False) -> Array:
        """Deterministic tracking actions from the posterior mean, or from the prior mean with ``use_prior``."""
        params = store.bind()
        state = Tensor(np.atleast_2d(states)[:, :self.layout.model_size])
        observation = self.observation(state)
        if use_prior:
            latent = self.prior_mean(params, observation)
        else:
            latent = self.posterior_mt(params, observation, self.reference_window(state, references)).mean
        return self.decode(params, observation, latent).data

    def act_cf(self, store: ParamStore, states: Array, commands: Array) -> Array:
        """Deterministic command-following actions from the posterior mean."""
        params = store.bind()
        observation = self.observation(Tensor(np.atleast_2d(states)[:, :self.layout.model_size]))
        latent = self.posterior_cf(params, observation, Tensor(np.atleast_2d(commands))).mean
        return self.decode(params, observation, latent).data

    def sample_mt(self, store: ParamStore, states: Array, references: Array, rng: np.random.Generator) -> Array:
        params = store.bind()
        state = Tensor(np.atleast_2d(states)[:, :self.layout.model_size])
        observation = self.observation(state)
        dist = self.posterior_mt(params, observation, self.reference_window(state, references))
        return self.decode(params, observation, sample_latent(dist, rng)).data

    def sample_cf(self, store: ParamStore, states: Array, commands: Array, rng: np.random.Generator) -> Array:
        params = store.bind()
        observation = self.observation(Tensor(np.atleast_2d(states)[:, :self.layout.model_size]))
        dist = self.posterior_cf(params, observation, Tensor(np.atleast_2d(commands)))
        return self.decode(params, observation, sample_latent(dist, rng)).data
