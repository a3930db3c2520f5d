from __future__ import annotations

import math

import numpy as np
import pytest

from worldwalk.autodiff import ParamStore, Tensor, backward, init_mlp
from worldwalk.buffer import ReplayBuffer
from worldwalk.envsim import ENVIRONMENTS, ScriptedGait, StateLayout, rollout_batch, transform_pose
from worldwalk.errors import InsufficientDataError, NonFiniteError
from worldwalk.worldmodel import PREFIX, Normalizer, WorldModel, body_delta


def _gait_buffer(layout: StateLayout, trajectories: int, steps: int, seed: int) -> ReplayBuffer:
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer()
    for speed in np.linspace(0.3, 1.2, trajectories):
        gait = ScriptedGait(float(speed), 0.2, layout.joints, noise=0.1)
        buffer.extend(rollout_batch(gait, np.zeros((1, layout.size)), ENVIRONMENTS['original'], steps, rng))
    return buffer


def _model_states(layout: StateLayout, count: int, rng: np.random.Generator) -> np.ndarray:
    states = rng.normal(0.0, 0.5, size=(count, layout.model_size))
    states[:, 2] = rng.uniform(-math.pi, math.pi, size=count)
    return states


def test_fresh_model_is_identity(layout: StateLayout, rng: np.random.Generator) -> None:
    model, store = WorldModel(layout, (16, 16)), ParamStore()
    model.init_params(store, rng)
    states = _model_states(layout, 5, rng)
    actions = rng.uniform(-1.0, 1.0, size=(5, layout.joints))
    np.testing.assert_array_equal(model.predict_array(store, states, actions), states)


def test_body_delta_is_frame_invariant(layout: StateLayout, rng: np.random.Generator) -> None:
    model, store = WorldModel(layout, (16,)), ParamStore()
    init_mlp(store, PREFIX, model.spec, rng, output_scale=1.0)
    states = _model_states(layout, 4, rng)
    moved = transform_pose(states, np.array([-2.0, 5.0]), 1.1)
    actions = rng.uniform(-1.0, 1.0, size=(4, layout.joints))
    delta = body_delta(states, model.predict_array(store, states, actions), layout)
    delta_moved = body_delta(moved, model.predict_array(store, moved, actions), layout)
    np.testing.assert_allclose(delta_moved, delta, atol=1e-12)


def test_zero_residual_one_step_loss(layout: StateLayout, rng: np.random.Generator) -> None:
    model, store = WorldModel(layout, (8,)), ParamStore()
    model.init_params(store, rng)
    buffer = _gait_buffer(layout, 1, 60, seed=1)
    segments = buffer.sample_segments(6, 1, rng)
    loss = model.prediction_loss(store.bind(), segments.states, segments.actions).item()
    width = layout.model_size
    expected = np.linalg.norm(segments.states[:, 1, :width] - segments.states[:, 0, :width], axis=1).mean()
    assert loss == pytest.approx(expected, rel=1e-12)


def test_full_states_are_cut_to_model_width(layout: StateLayout, rng: np.random.Generator) -> None:
    model, store = WorldModel(layout, (8,)), ParamStore()
    init_mlp(store, PREFIX, model.spec, rng)
    full = rng.normal(size=(3, layout.size))
    actions = rng.normal(size=(3, layout.joints))
    predicted = model.predict_array(store, full, actions)
    assert predicted.shape == (3, layout.model_size)
    np.testing.assert_array_equal(predicted, model.predict_array(store, full[:, :layout.model_size], actions))


def test_non_finite_prediction_names_field(layout: StateLayout, rng: np.random.Generator) -> None:
    model, store = WorldModel(layout, (8,)), ParamStore()
    model.init_params(store, rng)
    bias = np.zeros(layout.model_size)
    bias[3] = np.inf
    store.set(f'{PREFIX}.b1', bias)
    with pytest.raises(NonFiniteError, match="'vx'"):
        model.predict_array(store, _model_states(layout, 2, rng), np.zeros((2, layout.joints)))


def test_no_updates_leaves_model_unchanged(layout: StateLayout, rng: np.random.Generator) -> None:
    model, store = WorldModel(layout, (8,)), ParamStore()
    model.init_params(store, rng)
    before = store.copy()
    assert model.train(store, _gait_buffer(layout, 1, 30, seed=2), 0, 4, 2, 1e-3, rng) is None
    for name in store:
        np.testing.assert_array_equal(store[name], before[name])
    assert not model.fitted


def test_training_needs_enough_segments(layout: StateLayout, rng: np.random.Generator) -> None:
    model, store = WorldModel(layout, (8,)), ParamStore()
    model.init_params(store, rng)
    with pytest.raises(InsufficientDataError) as info:
        model.train(store, _gait_buffer(layout, 1, 5, seed=3), 1, 16, 2, 1e-3, rng)
    assert (info.value.required, info.value.available) == (16, 4)


def test_training_reduces_prediction_loss(layout: StateLayout) -> None:
    model, store = WorldModel(layout, (32, 32)), ParamStore()
    model.init_params(store, np.random.default_rng(0))
    train_buffer = _gait_buffer(layout, 4, 150, seed=4)
    held_out = _gait_buffer(layout, 2, 150, seed=5).sample_segments(64, 1, np.random.default_rng(6))

    def held_out_loss() -> float:
        return model.prediction_loss(store.bind(), held_out.states, held_out.actions).item()

    model.fit_normalizer(train_buffer)
    initial = held_out_loss()
    model.train(store, train_buffer, 300, 32, 1, 3e-3, np.random.default_rng(7))
    assert held_out_loss() < 0.5 * initial


def test_training_is_deterministic(layout: StateLayout) -> None:
    buffer = _gait_buffer(layout, 2, 40, seed=8)
    stores = []
    for _ in range(2):
        model, store = WorldModel(layout, (8,)), ParamStore()
        model.init_params(store, np.random.default_rng(0))
        model.train(store, buffer, 5, 4, 2, 1e-3, np.random.default_rng(9))
        stores.append(store)
    for name in stores[0]:
        np.testing.assert_array_equal(stores[0][name], stores[1][name])


def test_normalizer_is_fitted_once(layout: StateLayout) -> None:
    model = WorldModel(layout, (8,))
    model.fit_normalizer(_gait_buffer(layout, 1, 40, seed=10))
    fitted = model.normalizer
    model.fit_normalizer(_gait_buffer(layout, 1, 40, seed=11))
    assert model.normalizer is fitted
    assert model.fitted


def test_normalizer_state_round_trip(layout: StateLayout) -> None:
    buffer = _gait_buffer(layout, 2, 30, seed=12)
    normalizer = Normalizer.fit(*buffer.transitions(), layout)
    restored = Normalizer.from_dict(normalizer.to_dict())
    for name, value in normalizer.to_dict().items():
        np.testing.assert_array_equal(getattr(restored, name), value)
    model = WorldModel(layout, (8,))
    model.load_state_dict({'fitted': True, **normalizer.to_dict()})
    assert model.fitted
    assert model.state_dict() == {'fitted': True, **normalizer.to_dict()}


def test_prediction_is_differentiable_in_state(layout: StateLayout, rng: np.random.Generator) -> None:
    model, store = WorldModel(layout, (8,)), ParamStore()
    init_mlp(store, PREFIX, model.spec, rng)
    state = Tensor(_model_states(layout, 2, rng), requires_grad=True)
    predicted = model.predict(store.bind(), state, Tensor(np.zeros((2, layout.joints))))
    backward(predicted[:, 0].sum())
    assert state.grad is not None
    assert state.grad.shape == state.shape
