from __future__ import annotations

import math

import numpy as np
import pytest

from worldwalk.autodiff import ParamStore, Tensor, forward_mlp
from worldwalk.envsim import StateLayout, transform_pose
from worldwalk.errors import MissingSnapshotError, ShapeError
from worldwalk.vaepolicy import (
    CF_ENCODER,
    DECODER,
    MT_ENCODER,
    PRIOR,
    LatentDistribution,
    PolicyConfig,
    VAEPolicy,
    cf_loss,
    diagonal_gaussian_kl,
    kl_loss,
    sample_latent,
    tracking_loss,
)
from worldwalk.worldmodel import WorldModel

SMALL = PolicyConfig(hidden=(8,), latent_dim=3, window=2)


def _policy(layout: StateLayout, rng: np.random.Generator) -> tuple[VAEPolicy, ParamStore]:
    policy, store = VAEPolicy(layout, SMALL), ParamStore()
    policy.init_params(store, rng)
    return policy, store


def _zero_output(store: ParamStore, policy: VAEPolicy, network: str) -> None:
    last = len(policy.specs[network].sizes) - 2
    store.set(f'{network}.w{last}', np.zeros_like(store[f'{network}.w{last}']))
    store.set(f'{network}.b{last}', np.zeros_like(store[f'{network}.b{last}']))


def _states(layout: StateLayout, count: int, rng: np.random.Generator) -> np.ndarray:
    states = rng.normal(0.0, 0.3, size=(count, layout.model_size))
    states[:, 2] = rng.uniform(-math.pi, math.pi, size=count)
    return states


def test_kl_values() -> None:
    assert kl_loss(Tensor(np.zeros((1, 2))), 0.3).item() == 0.0
    assert kl_loss(Tensor([[0.3, 0.4]]), 0.3).item() == pytest.approx(0.25 / 0.18, rel=1e-12)


def test_kl_matches_general_gaussian_formula(rng: np.random.Generator) -> None:
    sigma = 0.3
    for _ in range(100):
        prior_mean, residual = rng.normal(size=4), rng.normal(size=4)
        general = diagonal_gaussian_kl(prior_mean + residual, np.full(4, sigma), prior_mean, np.full(4, sigma))
        assert kl_loss(Tensor(residual[None]), sigma).item() == pytest.approx(general, abs=1e-10)


def test_tracking_loss_values(layout: StateLayout, rng: np.random.Generator) -> None:
    reference = _states(layout, 1, rng)
    assert np.all(tracking_loss(Tensor(reference), reference, layout).total.data == 0.0)

    predicted = reference.copy()
    predicted[0, layout.joint_pos] += np.array([0.6, 0.8, 0.0, 0.0])
    terms = tracking_loss(Tensor(predicted), reference, layout)
    assert terms.components['jpos'].item() == pytest.approx(1 - math.exp(-1), abs=1e-9)
    assert terms.total.item() == pytest.approx(0.6 * (1 - math.exp(-1)), abs=1e-9)
    assert terms.total.item() == pytest.approx(0.3793, abs=1e-4)

    predicted = reference.copy()
    predicted[0, 0:2] += np.array([math.sqrt(0.05), 0.0])
    terms = tracking_loss(Tensor(predicted), reference, layout)
    assert terms.components['bpos'].item() == pytest.approx(1 - math.exp(-1), abs=1e-9)


def test_tracking_loss_wraps_heading(layout: StateLayout, rng: np.random.Generator) -> None:
    reference = _states(layout, 1, rng)
    reference[0, 2] = math.pi - 0.01
    predicted = reference.copy()
    predicted[0, 2] = -math.pi + 0.01
    bpos = tracking_loss(Tensor(predicted), reference, layout).components['bpos'].item()
    assert bpos == pytest.approx(1 - math.exp(-10 * 0.02**2), abs=1e-9)


def test_cf_loss_values() -> None:
    state = np.zeros((1, 8))
    state[0, 3], state[0, 5] = 0.9, 0.2
    assert cf_loss(Tensor(state), np.array([[0.9, 0.2]])).item() == 0.0
    assert cf_loss(Tensor(state), np.array([[0.4, 0.2]])).item() == pytest.approx(2 * (1 - math.exp(-1)), abs=1e-9)
    assert cf_loss(Tensor(state), np.array([[50.0, -50.0]])).item() == pytest.approx(3.0)


def test_policy_config_validation() -> None:
    with pytest.raises(ValueError, match='sigma'):
        PolicyConfig(sigma=0.0)
    with pytest.raises(ValueError, match='window'):
        PolicyConfig(window=0)


def test_zeroed_mt_encoder_gives_prior(layout: StateLayout, rng: np.random.Generator) -> None:
    policy, store = _policy(layout, rng)
    _zero_output(store, policy, MT_ENCODER)
    params = store.bind()
    state = Tensor(_states(layout, 3, rng))
    observation = policy.observation(state)
    window = policy.reference_window(state, rng.normal(size=(3, 2, layout.model_size)))
    posterior = policy.posterior_mt(params, observation, window)
    np.testing.assert_array_equal(posterior.mean.data, policy.prior_mean(params, observation).data)


def test_mt_posterior_is_prior_plus_residual(layout: StateLayout, rng: np.random.Generator) -> None:
    policy, store = _policy(layout, rng)
    params = store.bind()
    observation = Tensor(np.zeros((1, layout.observation_size)))
    window = Tensor(np.zeros((1, 2 * layout.model_size)))
    prior = forward_mlp(params, PRIOR, observation, policy.specs[PRIOR]).data
    residual = forward_mlp(
        params, MT_ENCODER, Tensor(np.zeros((1, policy.specs[MT_ENCODER].n_in))), policy.specs[MT_ENCODER],
    ).data
    np.testing.assert_allclose(policy.posterior_mt(params, observation, window).mean.data, prior + residual)


def test_fresh_cf_encoder_gives_prior(layout: StateLayout, rng: np.random.Generator) -> None:
    policy, store = _policy(layout, rng)
    params = store.bind()
    observation = policy.observation(Tensor(_states(layout, 4, rng)))
    commands = Tensor(rng.uniform(0.0, 1.5, size=(4, 2)))
    np.testing.assert_array_equal(
        policy.posterior_cf(params, observation, commands).mean.data,
        policy.prior_mean(params, observation).data,
    )


def test_vanishing_sigma_sample_is_mean(rng: np.random.Generator) -> None:
    mean = Tensor(rng.normal(size=(2, 3)))
    np.testing.assert_allclose(sample_latent(LatentDistribution(mean, 1e-12), rng).data, mean.data, atol=1e-10)


def test_decoder_output_is_bounded(layout: StateLayout, rng: np.random.Generator) -> None:
    policy, store = _policy(layout, rng)
    observation = Tensor(rng.normal(0.0, 50.0, size=(16, layout.observation_size)))
    latent = Tensor(rng.normal(0.0, 50.0, size=(16, SMALL.latent_dim)))
    actions = policy.decode(store.bind(), observation, latent).data
    assert np.all(np.abs(actions) <= math.pi / 2)

    _zero_output(store, policy, DECODER)
    np.testing.assert_array_equal(policy.decode(store.bind(), observation, latent).data, 0.0)


def test_actions_are_deterministic(layout: StateLayout, rng: np.random.Generator) -> None:
    policy, store = _policy(layout, rng)
    states, commands = _states(layout, 3, rng), rng.uniform(0.0, 1.0, size=(3, 2))
    np.testing.assert_array_equal(policy.act_cf(store, states, commands), policy.act_cf(store, states, commands))


def test_reference_window_is_pose_relative(layout: StateLayout, rng: np.random.Generator) -> None:
    policy, _ = _policy(layout, rng)
    states = _states(layout, 2, rng)
    references = rng.normal(size=(2, 2, layout.model_size))
    offset, angle = np.array([4.0, -3.0]), 2.0
    moved_states = transform_pose(states, offset, angle)
    moved_references = transform_pose(references, offset, angle)
    np.testing.assert_allclose(
        policy.reference_window(Tensor(moved_states), moved_references).data,
        policy.reference_window(Tensor(states), references).data,
        atol=1e-12,
    )
    with pytest.raises(ShapeError):
        policy.reference_window(Tensor(states), references[:, :1])


def test_regularizer(layout: StateLayout, rng: np.random.Generator) -> None:
    policy, store = _policy(layout, rng)
    observation = Tensor(rng.normal(size=(2, layout.observation_size)))
    latent = Tensor(rng.normal(size=(2, SMALL.latent_dim)))
    with pytest.raises(MissingSnapshotError):
        policy.reg_loss(store.bind(), observation, latent)

    _zero_output(store, policy, DECODER)
    policy.snapshot_decoder(store)
    assert policy.has_snapshot(store)
    np.testing.assert_array_equal(policy.reg_loss(store.bind(), observation, latent).data, 0.0)

    delta = 0.2
    bias = np.zeros(layout.joints)
    bias[1] = delta
    store.set(f'{DECODER}.b1', bias)
    reg = policy.reg_loss(store.bind(), observation, latent).data
    np.testing.assert_allclose(reg, math.pi / 2 * math.tanh(delta))


def test_tracking_term_vanishes_on_perfect_reference(layout: StateLayout, rng: np.random.Generator) -> None:
    policy, store = _policy(layout, rng)
    world_model = WorldModel(layout, (8,))
    world_model.init_params(store, rng)
    starts = _states(layout, 3, rng)
    references = np.stack([starts, starts + 0.1], axis=1)
    result = policy.mt_policy_loss(store.bind(), world_model, starts, references, np.random.default_rng(0))
    assert result.steps == 1
    assert result.components['tracking'] == 0.0
    assert result.loss.item() == pytest.approx(SMALL.kl_weight * result.components['kl'], rel=1e-12)


def test_command_loss_components(layout: StateLayout, rng: np.random.Generator) -> None:
    policy, store = _policy(layout, rng)
    world_model = WorldModel(layout, (8,))
    world_model.init_params(store, rng)
    starts = _states(layout, 4, rng)
    commands = rng.uniform(0.0, 1.0, size=(4, 3, 2))
    result = policy.cf_policy_loss(store.bind(), world_model, starts, commands, np.random.default_rng(0))
    assert result.steps == 3
    assert 0.0 <= result.components['cf'] < 3.0
    assert result.per_step == pytest.approx(result.components['cf'], rel=1e-12)
    with pytest.raises(MissingSnapshotError):
        policy.cf_policy_loss(store.bind(), world_model, starts, commands, np.random.default_rng(0), include_reg=True)


def test_trainable_networks_per_phase(layout: StateLayout) -> None:
    policy = VAEPolicy(layout, SMALL)
    assert {name.split('.')[0] for name in policy.trainable('cf-scratch')} == {CF_ENCODER}
    assert {name.split('.')[0] for name in policy.trainable('finetune')} == {CF_ENCODER, DECODER}
    assert {name.split('.')[0] for name in policy.trainable('mt-scratch')} == {PRIOR, MT_ENCODER, DECODER}
