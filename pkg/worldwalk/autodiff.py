"""Reverse-mode differentiation over a define-by-run graph of float64 numpy arrays.

Every operation on a :class:`Tensor` records its parents and a backward rule when any parent requires a gradient.
The graph is rebuilt on every forward pass, so unroll lengths can vary freely between updates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence

    import numpy.typing as npt

    Array = npt.NDArray[np.float64]
    Backward = Callable[[Array], Sequence['Array | None']]

_logger = logging.getLogger('worldwalk.autodiff')


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value: Tensor | float | Array) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _has_advanced_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(part, np.ndarray | list) for part in parts)


class Tensor:
    """A node in the computation graph: a float64 array plus the rule that propagates gradients to its parents.

    :ivar data: The cached forward value.
    :ivar grad: The accumulated gradient after :func:`backward`, or ``None`` if nothing reached this node.
    :ivar requires_grad: Whether gradients are tracked through this node.
    :ivar op: Name of the operation that produced this node (``'leaf'`` for parameters and constants).
    """

    __slots__ = ('_backward', '_parents', 'data', 'grad', 'name', 'op', 'requires_grad')
    # makes numpy defer to the reflected operators below for ``array <op> tensor``
    __array_ufunc__ = None

    def __init__(
        self,
        data: Array | float | Sequence[float],
        *,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = 'leaf'
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None

    def __repr__(self) -> str:
        label = f' {self.name}' if self.name else ''
        return f'<Tensor{label} op={self.op} shape={self.shape} requires_grad={self.requires_grad}>'

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> Array:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __add__(self, other: Tensor | float | Array) -> Tensor:
        other = _as_tensor(other)
        return _node(
            self.data + other.data, (self, other), 'add',
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other: Tensor | float | Array) -> Tensor:
        other = _as_tensor(other)
        return _node(
            self.data - other.data, (self, other), 'sub',
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other: float | Array) -> Tensor:
        return _as_tensor(other) - self

    def __neg__(self) -> Tensor:
        return _node(-self.data, (self,), 'neg', lambda g: (-g,))

    def __mul__(self, other: Tensor | float | Array) -> Tensor:
        other = _as_tensor(other)
        return _node(
            self.data * other.data, (self, other), 'mul',
            lambda g: (_unbroadcast(g * other.data, self.shape), _unbroadcast(g * self.data, other.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other: Tensor | float | Array) -> Tensor:
        other = _as_tensor(other)
        return _node(
            self.data / other.data, (self, other), 'div',
            lambda g: (
                _unbroadcast(g / other.data, self.shape),
                _unbroadcast(-g * self.data / other.data**2, other.shape),
            ),
        )

    def __rtruediv__(self, other: float | Array) -> Tensor:
        return _as_tensor(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        return _node(
            self.data**exponent, (self,), 'pow',
            lambda g: (g * exponent * self.data ** (exponent - 1),),
        )

    def __matmul__(self, other: Tensor) -> Tensor:
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:  # noqa: PLR2004
            raise ShapeError('matmul', f'cannot multiply {self.shape} by {other.shape}')
        return _node(
            self.data @ other.data, (self, other), 'matmul',
            lambda g: (g @ other.data.T, self.data.T @ g),
        )

    def __getitem__(self, index: Any) -> Tensor:
        def backward(g: Array) -> tuple[Array]:
            full = np.zeros_like(self.data)
            if _has_advanced_index(index):
                np.add.at(full, index, g)
            else:
                full[index] += g
            return (full,)

        return _node(self.data[index], (self,), 'index', backward)

    def sum(self, axis: int | None = None, *, keepdims: bool = False) -> Tensor:
        def backward(g: Array) -> tuple[Array]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), 'sum', backward)

    def mean(self, axis: int | None = None, *, keepdims: bool = False) -> Tensor:
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> Tensor:
        return _node(self.data.reshape(shape), (self,), 'reshape', lambda g: (g.reshape(self.shape),))

    def square(self) -> Tensor:
        return _node(self.data**2, (self,), 'square', lambda g: (2.0 * g * self.data,))

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return _node(out, (self,), 'exp', lambda g: (g * out,))

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return _node(out, (self,), 'tanh', lambda g: (g * (1.0 - out**2),))

    def sin(self) -> Tensor:
        return _node(np.sin(self.data), (self,), 'sin', lambda g: (g * np.cos(self.data),))

    def cos(self) -> Tensor:
        return _node(np.cos(self.data), (self,), 'cos', lambda g: (-g * np.sin(self.data),))

    def abs(self) -> Tensor:
        return _node(np.abs(self.data), (self,), 'abs', lambda g: (g * np.sign(self.data),))

    def elu(self) -> Tensor:
        positive = self.data > 0
        out = np.where(positive, self.data, np.expm1(np.minimum(self.data, 0.0)))
        return _node(out, (self,), 'elu', lambda g: (g * np.where(positive, 1.0, out + 1.0),))

    def clip(self, low: float, high: float) -> Tensor:
        inside = (self.data > low) & (self.data < high)
        return _node(np.clip(self.data, low, high), (self,), 'clip', lambda g: (g * inside,))


def _node(data: Array, parents: tuple[Tensor, ...], op: str, backward: Backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op, 'non-finite output of op')
    out = Tensor(data)
    out.op = op
    if any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along ``axis``, splitting the incoming gradient back into the pieces."""
    arrays = [tensor.data for tensor in tensors]
    try:
        data = np.concatenate(arrays, axis=axis)
    except ValueError as error:
        raise ShapeError('concat', str(error)) from error
    bounds = np.cumsum([array.shape[axis] for array in arrays])[:-1]
    return _node(data, tuple(tensors), 'concat', lambda g: tuple(np.split(g, bounds, axis=axis)))


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient is zero wherever the norm itself is zero."""
    out = np.sqrt(np.sum(x.data**2, axis=axis))

    def backward(g: Array) -> tuple[Array]:
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * x.data,)

    return _node(out, (x,), 'norm', backward)


def wrap_angle(x: Tensor) -> Tensor:
    """Wrap angles to (-pi, pi]; the gradient passes straight through."""
    return _node(wrap_angle_array(x.data), (x,), 'wrap', lambda g: (g,))


def wrap_angle_array(angle: Array | float) -> Array:
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + math.pi, 2 * math.pi) - math.pi
    return np.where(wrapped <= -math.pi, wrapped + 2 * math.pi, wrapped)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend((parent, False) for parent in node._parents if parent.requires_grad)
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, Array]:
    """Propagate gradients from a scalar loss to every node that requires them.

    :param loss: A scalar (single-element) tensor.
    :param params: Bound parameter leaves, usually from :meth:`ParamStore.bind`. Their gradients are returned.
    :return: A gradient per bound parameter name, in the mapping's order. Parameters that the loss does not reach, or
        that were bound without gradients, get an exact zero array.
    """
    if loss.size != 1:
        raise GraphError(f'backward root must be scalar, got shape {loss.shape}')

    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(_topological_order(loss)):
            if node._backward is None or node.grad is None:
                continue
            for parent, grad in zip(node._parents, node._backward(node.grad), strict=True):
                if grad is None or not parent.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=np.float64).reshape(parent.shape)  # noqa: PLW2901
                parent.grad = grad.copy() if parent.grad is None else parent.grad + grad

    if params is None:
        return {}
    return {
        name: leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        for name, leaf in params.items()
    }


@dataclass(frozen=True)
class LayerSpec:
    """Layer widths of a dense network, input first and output last; hidden layers use ELU, the output is linear."""

    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.sizes) < 2 or any(size < 1 for size in self.sizes):  # noqa: PLR2004
            raise ShapeError('LayerSpec', f'invalid layer sizes {self.sizes}')

    @classmethod
    def build(cls, n_in: int, hidden: Iterable[int], n_out: int) -> LayerSpec:
        return cls((n_in, *hidden, n_out))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def layers(self) -> Iterator[tuple[int, int]]:
        return zip(self.sizes[:-1], self.sizes[1:], strict=True)

    def param_names(self, prefix: str) -> list[str]:
        return [f'{prefix}.{kind}{i}' for i in range(len(self.sizes) - 1) for kind in ('w', 'b')]


def init_mlp(
    store: ParamStore,
    prefix: str,
    spec: LayerSpec,
    rng: np.random.Generator,
    *,
    output_scale: float = 1.0,
) -> None:
    """Add Glorot-uniform weights and zero biases for ``spec`` to ``store`` under ``prefix``.

    :param output_scale: Multiplier for the last layer's weights. ``0.0`` gives a network that outputs exact zeros.
    """
    last = len(spec.sizes) - 2
    for i, (n_in, n_out) in enumerate(spec.layers()):
        bound = math.sqrt(6.0 / (n_in + n_out))
        weights = rng.uniform(-bound, bound, size=(n_in, n_out))
        if i == last:
            weights = weights * output_scale
        store.add(f'{prefix}.w{i}', weights)
        store.add(f'{prefix}.b{i}', np.zeros(n_out))


def forward_mlp(params: Mapping[str, Tensor], prefix: str, x: Tensor, spec: LayerSpec) -> Tensor:
    """Evaluate a dense ELU network on a batch of row vectors.

    :param params: Bound parameters containing ``<prefix>.w<i>`` and ``<prefix>.b<i>`` for every layer.
    :param prefix: The network's name in the parameter store.
    :param x: Input of shape ``(batch, spec.n_in)``.
    :param spec: The layer widths.
    :raises ShapeError: If the input or a stored weight does not fit the layer it feeds, naming that layer.
    """
    last = len(spec.sizes) - 2
    h = x
    for i, (n_in, n_out) in enumerate(spec.layers()):
        layer = f'{prefix} layer {i}'
        try:
            weight, bias = params[f'{prefix}.w{i}'], params[f'{prefix}.b{i}']
        except KeyError as error:
            raise ShapeError(layer, f'missing parameter {error.args[0]!r}') from None
        if h.ndim != 2 or h.shape[1] != n_in:  # noqa: PLR2004
            raise ShapeError(layer, f'expected input width {n_in}, got shape {h.shape}')
        if weight.shape != (n_in, n_out) or bias.shape != (n_out,):
            raise ShapeError(layer, f'parameter shapes {weight.shape}/{bias.shape} do not match ({n_in}, {n_out})')
        h = h @ weight + bias
        if i < last:
            h = h.elu()
    return h


@dataclass
class AdamState:
    m: Array
    v: Array
    step: int = 0


class ParamStore:
    """Named parameter arrays plus per-tensor Adam moments and step counters; the unit of checkpointing."""

    def __init__(self) -> None:
        self._params: dict[str, Array] = {}
        self._adam: dict[str, AdamState] = {}

    def __repr__(self) -> str:
        return f'{self.__class__.__name__}({len(self._params)} tensors, {self.total_size()} values)'

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Array:
        return self._params[name]

    def names(self, prefix: str | None = None) -> list[str]:
        if prefix is None:
            return list(self._params)
        return [name for name in self._params if name.startswith(prefix + '.')]

    def total_size(self) -> int:
        return sum(array.size for array in self._params.values())

    def add(self, name: str, value: Array) -> None:
        if name in self._params:
            raise ValueError(f'parameter {name!r} already exists')
        array = np.array(value, dtype=np.float64)
        self._params[name] = array
        self._adam[name] = AdamState(np.zeros_like(array), np.zeros_like(array))

    def set(self, name: str, value: Array) -> None:
        array = np.array(value, dtype=np.float64)
        if array.shape != self._params[name].shape:
            raise ShapeError(name, f'expected shape {self._params[name].shape}, got {array.shape}')
        self._params[name] = array

    def remove(self, prefix: str) -> None:
        for name in self.names(prefix):
            del self._params[name]
            del self._adam[name]

    def adam_state(self, name: str) -> AdamState:
        return self._adam[name]

    def set_adam_state(self, name: str, state: AdamState) -> None:
        if state.m.shape != self._params[name].shape or state.v.shape != self._params[name].shape:
            raise ShapeError(name, 'optimizer moments do not match the parameter shape')
        self._adam[name] = state

    def copy_network(self, source: str, target: str) -> None:
        """Copy every tensor under ``source`` to the same suffix under ``target`` with fresh optimizer moments."""
        self.remove(target)
        for name in self.names(source):
            self.add(target + name.removeprefix(source), self._params[name])

    def copy(self) -> ParamStore:
        clone = ParamStore()
        for name, array in self._params.items():
            clone._params[name] = array.copy()
            state = self._adam[name]
            clone._adam[name] = AdamState(state.m.copy(), state.v.copy(), state.step)
        return clone

    def bind(self, trainable: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Wrap every parameter as a graph leaf; only names in ``trainable`` track gradients."""
        tracked = set(trainable or ())
        unknown = tracked - self._params.keys()
        if unknown:
            raise KeyError(f'unknown parameters: {sorted(unknown)}')
        return {
            name: Tensor(array, requires_grad=name in tracked, name=name)
            for name, array in self._params.items()
        }


def adam_step(
    store: ParamStore,
    grads: Mapping[str, Array],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Apply one bias-corrected Adam update to the parameters named in ``grads``.

    Nothing is updated if any gradient is non-finite.

    :raises NonFiniteError: Naming the first parameter whose gradient contains NaN or infinity.
    :raises ShapeError: If a gradient does not match its parameter's shape.
    """
    for name, grad in grads.items():
        if grad.shape != store[name].shape:
            raise ShapeError(name, f'gradient shape {grad.shape} does not match parameter {store[name].shape}')
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(name, 'non-finite gradient')

    for name, grad in grads.items():
        state = store.adam_state(name)
        step = state.step + 1
        m = beta1 * state.m + (1.0 - beta1) * grad
        v = beta2 * state.v + (1.0 - beta2) * grad**2
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        store.set(name, store[name] - lr * m_hat / (np.sqrt(v_hat) + eps))
        store.set_adam_state(name, AdamState(m, v, step))
    return store


@dataclass
class ParamCheck:
    name: str
    checked: int = 0
    near_zero: int = 0
    max_rel_error: float = 0.0
    worst_index: tuple[int, ...] = ()
    analytic: float = 0.0
    numeric: float = 0.0


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((param.max_rel_error for param in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self, count: int = 5) -> list[ParamCheck]:
        return sorted(self.params, key=lambda param: param.max_rel_error, reverse=True)[:count]


def finite_difference_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    store: ParamStore,
    *,
    names: Iterable[str] | None = None,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    zero_threshold: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The relative error divides by the larger gradient magnitude, floored at ``zero_threshold``. Entries below the
    floor (for example a saturated exponential far in its tail) are counted as near-zero and measured against the
    floor.

    :param loss_fn: Deterministic function from bound parameters to a scalar loss.
    :param store: The parameters; entries are perturbed in place and restored.
    :param names: Parameters to check, by default all of them.
    :param max_entries: Check at most this many randomly chosen entries per tensor, or every entry if ``None``.
    :return: Per-parameter worst relative error and pass/fail against ``tolerance``.
    """
    names = list(store) if names is None else list(names)
    analytic = _analytic_gradients(loss_fn, store, names)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    for name in names:
        original = store[name].copy()
        flat_indices = np.arange(original.size)
        if max_entries is not None and original.size > max_entries:
            flat_indices = np.sort(rng.choice(original.size, size=max_entries, replace=False))
        check = ParamCheck(name=name)
        for flat in flat_indices:
            index = np.unravel_index(flat, original.shape)
            values = []
            for sign in (1.0, -1.0):
                perturbed = original.copy()
                perturbed[index] += sign * eps
                store.set(name, perturbed)
                values.append(loss_fn(store.bind()).item())
            store.set(name, original)
            numeric = (values[0] - values[1]) / (2.0 * eps)
            exact = float(analytic[name][index])
            check.checked += 1
            scale = max(abs(exact), abs(numeric))
            if scale < zero_threshold:
                check.near_zero += 1
            error = abs(exact - numeric) / max(scale, zero_threshold)
            if error > check.max_rel_error:
                check.max_rel_error = error
                check.worst_index = tuple(int(i) for i in index)
                check.analytic, check.numeric = exact, numeric
        report.params.append(check)
        _logger.debug(f'{name}: max relative error {check.max_rel_error:.3e} over {check.checked} entries')
    return report


def _analytic_gradients(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    store: ParamStore,
    names: list[str],
) -> dict[str, Array]:
    bound = store.bind(names)
    return backward(loss_fn(bound), bound)
