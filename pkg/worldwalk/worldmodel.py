"""Residual world model: an MLP maps (observation, action) to a body-frame state delta composed onto the state."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from .autodiff import (
    LayerSpec,
    Tensor,
    adam_step,
    backward,
    concat,
    forward_mlp,
    init_mlp,
    norm,
    wrap_angle,
    wrap_angle_array,
)
from .envsim import StateLayout, rotate
from .errors import NonFiniteError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping

    import numpy.typing as npt

    from .autodiff import ParamStore
    from .buffer import ReplayBuffer

    Array = npt.NDArray[np.float64]

_logger = logging.getLogger('worldwalk.worldmodel')

PREFIX = 'world'
_MIN_STD = 1e-6


def body_delta(states: Array, next_states: Array, layout: StateLayout) -> Array:
    """The world-model target: position change in the body frame of ``states``, wrapped heading change, raw rest."""
    width = layout.model_size
    delta = next_states[..., :width] - states[..., :width]
    delta[..., 0:2] = rotate(delta[..., 0:2], -states[..., 2])
    delta[..., 2] = wrap_angle_array(delta[..., 2])
    return delta


def _safe_std(values: Array) -> Array:
    std = values.std(axis=0)
    return np.where(std > _MIN_STD, std, 1.0)


@dataclass
class Normalizer:
    """Input and output scaling of the world model, fitted once per training phase and then held fixed."""

    obs_mean: Array
    obs_std: Array
    action_mean: Array
    action_std: Array
    delta_std: Array

    @classmethod
    def identity(cls, layout: StateLayout) -> Normalizer:
        return cls(
            obs_mean=np.zeros(layout.observation_size),
            obs_std=np.ones(layout.observation_size),
            action_mean=np.zeros(layout.joints),
            action_std=np.ones(layout.joints),
            delta_std=np.ones(layout.model_size),
        )

    @classmethod
    def fit(cls, states: Array, actions: Array, next_states: Array, layout: StateLayout) -> Normalizer:
        """Fit from stacked transitions ``(N, width)``, ``(N, J)`` and ``(N, width)``."""
        if states.shape[0] == 0:
            raise ShapeError('Normalizer', 'cannot fit normalization statistics to zero transitions')
        observations = states[:, layout.observation]
        return cls(
            obs_mean=observations.mean(axis=0),
            obs_std=_safe_std(observations),
            action_mean=actions.mean(axis=0),
            action_std=_safe_std(actions),
            delta_std=_safe_std(body_delta(states, next_states, layout)),
        )

    def to_dict(self) -> dict[str, list[float]]:
        return {name: getattr(self, name).tolist() for name in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: Mapping[str, Iterable[float]]) -> Normalizer:
        return cls(**{name: np.asarray(data[name], dtype=np.float64) for name in cls.__dataclass_fields__})


class WorldModel:
    """The learned dynamics ``s_{t+1} = compose(s_t, f_w(o_t, a_t))`` over world-model states of width ``6 + 2J``.

    Parameters live in a shared :class:`ParamStore` under ``world.*``; the model object only holds the architecture
    and the normalization statistics.
    """

    def __init__(
        self,
        layout: StateLayout,
        hidden: Iterable[int] = (256, 256),
        normalizer: Normalizer | None = None,
    ) -> None:
        self.layout = layout
        self.spec = LayerSpec.build(layout.observation_size + layout.joints, hidden, layout.model_size)
        self.normalizer = normalizer or Normalizer.identity(layout)
        self.fitted = normalizer is not None

    def __repr__(self) -> str:
        return f'{self.__class__.__name__}(joints={self.layout.joints}, sizes={self.spec.sizes})'

    @property
    def param_names(self) -> list[str]:
        return self.spec.param_names(PREFIX)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        """Add freshly initialized parameters; the zeroed output layer makes the initial model the identity."""
        init_mlp(store, PREFIX, self.spec, rng, output_scale=0.0)

    def fit_normalizer(self, buffer: ReplayBuffer) -> None:
        if self.fitted:
            return
        self.normalizer = Normalizer.fit(*buffer.transitions(), self.layout)
        self.fitted = True
        _logger.debug('Fitted world-model normalization statistics')

    def _network_input(self, state: Tensor, action: Tensor) -> Tensor:
        norm_stats = self.normalizer
        observation = (state[:, self.layout.observation] - norm_stats.obs_mean) / norm_stats.obs_std
        return concat([observation, (action - norm_stats.action_mean) / norm_stats.action_std], axis=1)

    def predict(self, params: Mapping[str, Tensor], state: Tensor, action: Tensor) -> Tensor:
        """Predict the next world-model state for a batch.

        :param params: Bound parameters holding the ``world.*`` tensors.
        :param state: ``(batch, 6 + 2J)`` world-model states (full states are cut to that width).
        :param action: ``(batch, J)`` actions.
        :raises NonFiniteError: Naming the first state field whose prediction is not finite.
        """
        width = self.layout.model_size
        if state.shape[1] > width:
            state = state[:, :width]
        try:
            delta = forward_mlp(params, PREFIX, self._network_input(state, action), self.spec)
            delta = delta * self.normalizer.delta_std
            heading = state[:, 2:3]
            cos, sin = heading.cos(), heading.sin()
            body_dx, body_dy = delta[:, 0:1], delta[:, 1:2]
            position = state[:, 0:2] + concat([cos * body_dx - sin * body_dy, sin * body_dx + cos * body_dy])
            return concat([position, wrap_angle(heading + delta[:, 2:3]), state[:, 3:] + delta[:, 3:]])
        except NonFiniteError as error:
            field = self._first_non_finite_field(params, state, action)
            raise NonFiniteError(field, 'non-finite world-model prediction') from error

    def _first_non_finite_field(self, params: Mapping[str, Tensor], state: Tensor, action: Tensor) -> str:
        with np.errstate(all='ignore'):
            norm_stats = self.normalizer
            h = np.concatenate([
                (state.data[:, self.layout.observation] - norm_stats.obs_mean) / norm_stats.obs_std,
                (action.data - norm_stats.action_mean) / norm_stats.action_std,
            ], axis=1)
            last = len(self.spec.sizes) - 2
            for i in range(last + 1):
                h = h @ params[f'{PREFIX}.w{i}'].data + params[f'{PREFIX}.b{i}'].data
                if i < last:
                    h = np.where(h > 0, h, np.expm1(np.minimum(h, 0.0)))
            h = state.data + h * norm_stats.delta_std
        bad = np.flatnonzero(~np.all(np.isfinite(h), axis=0))
        names = self.layout.field_names()
        return names[int(bad[0])] if bad.size else 'input'

    def predict_array(self, store: ParamStore, states: Array, actions: Array) -> Array:
        """Gradient-free batch prediction on plain arrays."""
        return self.predict(store.bind(), Tensor(np.atleast_2d(states)), Tensor(np.atleast_2d(actions))).data

    def prediction_loss(self, params: Mapping[str, Tensor], states: Array, actions: Array) -> Tensor:
        """Open-loop n-step loss: per-step L2 state error (heading difference wrapped), summed over steps.

        :param states: ``(batch, n + 1, width)`` recorded states.
        :param actions: ``(batch, n, J)`` recorded actions.
        :return: The batch mean of the per-segment sums.
        """
        width = self.layout.model_size
        steps = actions.shape[1]
        if states.shape[1] != steps + 1 or steps < 1:
            raise ShapeError('prediction_loss', f'{states.shape[1]} states cannot bracket {steps} actions')
        predicted = Tensor(states[:, 0, :width])
        total: Tensor | None = None
        for t in range(steps):
            predicted = self.predict(params, predicted, Tensor(actions[:, t]))
            error = predicted - states[:, t + 1, :width]
            error = concat([error[:, 0:2], wrap_angle(error[:, 2:3]), error[:, 3:]])
            step_loss = norm(error, axis=1)
            total = step_loss if total is None else total + step_loss
        return total.mean()

    def train(
        self,
        store: ParamStore,
        buffer: ReplayBuffer,
        n_updates: int,
        batch_size: int,
        rollout: int,
        lr: float,
        rng: np.random.Generator,
    ) -> float | None:
        """Run ``n_updates`` Adam steps on batches of ``rollout``-step segments from ``buffer``.

        :return: The last batch loss, or ``None`` if no update ran.
        :raises InsufficientDataError: If the buffer holds fewer than ``batch_size`` valid segments.
        """
        if n_updates == 0:
            return None
        self.fit_normalizer(buffer)
        buffer.require_segments(batch_size, rollout)
        names = self.param_names
        loss_value = None
        for _ in range(n_updates):
            segments = buffer.sample_segments(batch_size, rollout, rng)
            bound = store.bind(names)
            loss = self.prediction_loss(bound, segments.states, segments.actions)
            adam_step(store, backward(loss, {name: bound[name] for name in names}), lr)
            loss_value = loss.item()
        _logger.debug(f'World model: {n_updates} updates, last loss {loss_value:.6f}')
        return loss_value

    def state_dict(self) -> dict[str, Any]:
        return {'fitted': self.fitted, **self.normalizer.to_dict()}

    def load_state_dict(self, data: Mapping[str, Any]) -> None:
        self.normalizer = Normalizer.from_dict(data)
        self.fitted = bool(data.get('fitted', True))
