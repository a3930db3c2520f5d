from __future__ import annotations

import math

import numpy as np
import pytest

from worldwalk.autodiff import (
    LayerSpec,
    ParamStore,
    Tensor,
    adam_step,
    backward,
    concat,
    finite_difference_check,
    forward_mlp,
    init_mlp,
    norm,
    wrap_angle_array,
)
from worldwalk.errors import GraphError, NonFiniteError, ShapeError


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def test_zero_network_outputs_zero(rng: np.random.Generator) -> None:
    spec = LayerSpec.build(5, [8], 3)
    store = ParamStore()
    init_mlp(store, 'net', spec, rng, output_scale=0.0)
    out = forward_mlp(store.bind(), 'net', Tensor(rng.normal(size=(4, 5))), spec)
    assert np.array_equal(out.data, np.zeros((4, 3)))


def test_single_linear_layer_identity() -> None:
    spec = LayerSpec((3, 3))
    store = ParamStore()
    store.add('net.w0', np.eye(3))
    store.add('net.b0', np.zeros(3))
    x = np.array([[0.5, -1.0, 2.0]])
    assert np.array_equal(forward_mlp(store.bind(), 'net', Tensor(x), spec).data, x)


def test_forward_matches_hand_evaluation(rng: np.random.Generator) -> None:
    spec = LayerSpec.build(8, [8], 4)
    store = ParamStore()
    init_mlp(store, 'net', spec, rng)
    store.set('net.b0', rng.normal(size=8))
    store.set('net.b1', rng.normal(size=4))
    x = rng.normal(size=(2, 8))
    expected = _elu(x @ store['net.w0'] + store['net.b0']) @ store['net.w1'] + store['net.b1']
    out = forward_mlp(store.bind(), 'net', Tensor(x), spec)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_forward_shape_error_names_layer(rng: np.random.Generator) -> None:
    spec = LayerSpec.build(5, [8], 3)
    store = ParamStore()
    init_mlp(store, 'world', spec, rng)
    with pytest.raises(ShapeError, match='world layer 0'):
        forward_mlp(store.bind(), 'world', Tensor(np.zeros((2, 4))), spec)


def test_invalid_layer_spec() -> None:
    with pytest.raises(ShapeError):
        LayerSpec((4,))


def test_linear_gradient() -> None:
    x = np.array([1.0, -2.0, 3.5])
    w = Tensor(np.zeros(3), requires_grad=True)
    loss = (w * x).sum()
    backward(loss)
    np.testing.assert_array_equal(w.grad, x)


def test_disconnected_parameter_gets_exact_zero() -> None:
    store = ParamStore()
    store.add('a', np.ones(2))
    store.add('b', np.ones(3))
    bound = store.bind(['a', 'b'])
    grads = backward((bound['a'] * 2.0).sum(), bound)
    np.testing.assert_array_equal(grads['a'], [2.0, 2.0])
    np.testing.assert_array_equal(grads['b'], np.zeros(3))


def test_backward_needs_scalar_root() -> None:
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(w * 2.0)


def test_shared_node_accumulates() -> None:
    w = Tensor(np.array([3.0]), requires_grad=True)
    y = w * w + w
    backward(y.sum())
    np.testing.assert_allclose(w.grad, [7.0])


@pytest.mark.parametrize('op', ['tanh', 'exp', 'sin', 'cos', 'elu', 'square'])
def test_unary_ops_match_finite_differences(op: str, rng: np.random.Generator) -> None:
    store = ParamStore()
    store.add('x', rng.normal(size=(3, 2)))

    def loss(params):
        return getattr(params['x'], op)().sum()

    assert finite_difference_check(loss, store).passed


def test_tanh_norm_loss_matches_finite_differences(rng: np.random.Generator) -> None:
    store = ParamStore()
    store.add('W', rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(5, 4)))

    def loss(params):
        return (norm((x @ params['W']).tanh()) ** 2).sum()

    report = finite_difference_check(loss, store, eps=1e-5, tolerance=1e-4)
    assert report.passed
    assert report.max_rel_error < 1e-4


def test_indexing_concat_and_broadcast_gradients(rng: np.random.Generator) -> None:
    store = ParamStore()
    store.add('a', rng.normal(size=(4, 3)))
    store.add('b', rng.normal(size=(3,)))
    rows = np.array([0, 2, 2])

    def loss(params):
        joined = concat([params['a'][rows], params['a'][:3, 1:2] * params['b']], axis=-1)
        return (joined.square().mean(axis=0) / (params['b'].abs() + 1.0).sum()).sum()

    assert finite_difference_check(loss, store).passed


def test_linear_loss_check_is_exact(rng: np.random.Generator) -> None:
    store = ParamStore()
    store.add('w', rng.normal(size=5))
    x = rng.normal(size=5)
    report = finite_difference_check(lambda params: (params['w'] * x).sum(), store)
    assert report.max_rel_error < 1e-8


def test_saturated_exponential_is_near_zero_not_failure() -> None:
    store = ParamStore()
    store.add('w', np.zeros(1))

    def loss(params):
        return (1.0 - ((params['w'] - 20.0).abs() * -2.0).exp()).sum()

    report = finite_difference_check(loss, store)
    assert report.passed
    assert report.params[0].near_zero == 1


def test_non_finite_output_names_op() -> None:
    x = Tensor(np.array([1000.0]), requires_grad=True)
    with np.errstate(over='ignore'), pytest.raises(NonFiniteError, match='exp'):
        x.exp()


def test_adam_first_step() -> None:
    store = ParamStore()
    store.add('w', np.array([1.0]))
    adam_step(store, {'w': np.array([1.0])}, lr=0.1)
    assert store['w'][0] == pytest.approx(0.9, abs=1e-6)
    assert store.adam_state('w').step == 1


def test_adam_zero_gradient_keeps_parameters() -> None:
    store = ParamStore()
    store.add('w', np.array([1.0, -2.0]))
    adam_step(store, {'w': np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(store['w'], [1.0, -2.0])


def test_adam_moments_decay_under_zero_gradient() -> None:
    store = ParamStore()
    store.add('w', np.array([1.0, -2.0]))
    adam_step(store, {'w': np.array([1.0, 1.0])}, lr=0.1)
    first = store.adam_state('w')
    adam_step(store, {'w': np.zeros(2)}, lr=0.1)
    np.testing.assert_allclose(store.adam_state('w').m, 0.9 * first.m)
    np.testing.assert_allclose(store.adam_state('w').v, 0.999 * first.v)


def test_adam_rejects_non_finite_gradient_without_updating() -> None:
    store = ParamStore()
    store.add('a', np.ones(2))
    store.add('b', np.ones(2))
    with pytest.raises(NonFiniteError, match="'b'"):
        adam_step(store, {'a': np.ones(2), 'b': np.array([np.nan, 0.0])}, lr=0.1)
    np.testing.assert_array_equal(store['a'], np.ones(2))
    assert store.adam_state('a').step == 0


def test_adam_is_deterministic(rng: np.random.Generator) -> None:
    grads = [{'w': rng.normal(size=3)} for _ in range(5)]
    results = []
    for _ in range(2):
        store = ParamStore()
        store.add('w', np.zeros(3))
        for grad in grads:
            adam_step(store, grad, lr=1e-2)
        results.append(store['w'].copy())
    assert np.array_equal(results[0], results[1])


def test_param_store_copy_network_and_bind(rng: np.random.Generator) -> None:
    spec = LayerSpec.build(3, [4], 2)
    store = ParamStore()
    init_mlp(store, 'decoder', spec, rng)
    with pytest.raises(ValueError, match='already exists'):
        store.add('decoder.w0', np.zeros((3, 4)))
    store.copy_network('decoder', 'decoder_ori')
    assert store.names('decoder_ori') == ['decoder_ori.w0', 'decoder_ori.b0', 'decoder_ori.w1', 'decoder_ori.b1']
    np.testing.assert_array_equal(store['decoder_ori.w1'], store['decoder.w1'])
    bound = store.bind(['decoder.w0'])
    assert bound['decoder.w0'].requires_grad
    assert not bound['decoder_ori.w0'].requires_grad
    with pytest.raises(KeyError):
        store.bind(['missing'])


def test_wrap_angle_range() -> None:
    angles = np.array([math.pi, -math.pi, 3 * math.pi, 0.5, -7.0])
    wrapped = wrap_angle_array(angles)
    assert np.all(wrapped > -math.pi)
    assert np.all(wrapped <= math.pi)
    np.testing.assert_allclose(np.cos(wrapped), np.cos(angles), atol=1e-12)
