"""Finite-difference verification of every training loss: world-model prediction, motion tracking and command
following with the decoder regularizer.

Each case builds small networks with non-trivial output layers, draws a random batch, and checks the analytic
gradient of every trainable parameter against central differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .autodiff import ParamStore, finite_difference_check, init_mlp
from .envsim import StateLayout
from .vaepolicy import CF_ENCODER, DECODER, PolicyConfig, VAEPolicy
from .worldmodel import PREFIX, WorldModel

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Mapping

    import numpy.typing as npt

    from .autodiff import GradCheckReport, Tensor

    Array = npt.NDArray[np.float64]

_logger = logging.getLogger('worldwalk.gradcheck')

GRADIENT_CASES = ('world-n1', 'world-n4', 'world-n8', 'mt-n4', 'cf-reg-n4')


@dataclass(frozen=True)
class GradCheckSettings:
    joints: int = 4
    hidden: tuple[int, ...] = (8, 8)
    latent_dim: int = 4
    window: int = 2
    batch_size: int = 3
    eps: float = 1e-5
    tolerance: float = 1e-4
    max_entries: int | None = 12


@dataclass
class CaseResult:
    case: str
    seed: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def as_row(self) -> dict[str, object]:
        worst = self.report.worst(1)
        return {
            'case': self.case,
            'seed': self.seed,
            'max_rel_error': self.report.max_rel_error,
            'worst_param': worst[0].name if worst else '',
            'passed': self.passed,
        }


def _random_states(layout: StateLayout, shape: tuple[int, ...], rng: np.random.Generator) -> Array:
    states = rng.normal(0.0, 0.5, size=(*shape, layout.model_size))
    states[..., 2] = rng.uniform(-np.pi, np.pi, size=shape)
    return states


def _world_model(
    layout: StateLayout,
    settings: GradCheckSettings,
    store: ParamStore,
    rng: np.random.Generator,
) -> WorldModel:
    world_model = WorldModel(layout, settings.hidden)
    # a zeroed output layer would make every hidden-layer gradient exactly zero
    init_mlp(store, PREFIX, world_model.spec, rng, output_scale=0.5)
    return world_model


def _policy(
    layout: StateLayout,
    settings: GradCheckSettings,
    store: ParamStore,
    rng: np.random.Generator,
) -> VAEPolicy:
    policy = VAEPolicy(layout, PolicyConfig(
        hidden=settings.hidden,
        latent_dim=settings.latent_dim,
        window=settings.window,
    ))
    policy.init_params(store, rng)
    store.remove(CF_ENCODER)
    init_mlp(store, CF_ENCODER, policy.specs[CF_ENCODER], rng)
    return policy


def _check(
    loss: Callable[[Mapping[str, Tensor]], Tensor],
    store: ParamStore,
    names: Iterable[str],
    settings: GradCheckSettings,
    seed: int,
) -> GradCheckReport:
    return finite_difference_check(
        loss,
        store,
        names=names,
        eps=settings.eps,
        tolerance=settings.tolerance,
        max_entries=settings.max_entries,
        seed=seed,
    )


def check_world_loss(steps: int, seed: int, settings: GradCheckSettings | None = None) -> GradCheckReport:
    """Gradient check of the open-loop ``steps``-step world-model prediction loss."""
    settings = settings or GradCheckSettings()
    rng = np.random.default_rng(seed)
    layout, store = StateLayout(settings.joints), ParamStore()
    world_model = _world_model(layout, settings, store, rng)
    states = _random_states(layout, (settings.batch_size, steps + 1), rng)
    actions = rng.uniform(-1.0, 1.0, size=(settings.batch_size, steps, layout.joints))

    def loss(params: Mapping[str, Tensor]) -> Tensor:
        return world_model.prediction_loss(params, states, actions)

    return _check(loss, store, world_model.param_names, settings, seed)


def check_tracking_loss(steps: int, seed: int, settings: GradCheckSettings | None = None) -> GradCheckReport:
    """Gradient check of the motion-tracking loss (tracking plus KL) through a ``steps``-step world-model unroll."""
    settings = settings or GradCheckSettings()
    rng = np.random.default_rng(seed)
    layout, store = StateLayout(settings.joints), ParamStore()
    world_model = _world_model(layout, settings, store, rng)
    policy = _policy(layout, settings, store, rng)
    starts = _random_states(layout, (settings.batch_size,), rng)
    references = starts[:, None, :] + rng.normal(0.0, 0.1, size=(settings.batch_size, steps + settings.window - 1, 1))

    def loss(params: Mapping[str, Tensor]) -> Tensor:
        # latent noise is redrawn identically on every evaluation
        return policy.mt_policy_loss(params, world_model, starts, references, np.random.default_rng(seed)).loss

    return _check(loss, store, policy.trainable('mt-scratch'), settings, seed)


def check_command_loss(steps: int, seed: int, settings: GradCheckSettings | None = None) -> GradCheckReport:
    """Gradient check of the command-following loss plus the weighted decoder regularizer."""
    settings = settings or GradCheckSettings()
    rng = np.random.default_rng(seed)
    layout, store = StateLayout(settings.joints), ParamStore()
    world_model = _world_model(layout, settings, store, rng)
    policy = _policy(layout, settings, store, rng)
    policy.snapshot_decoder(store)
    # the drift norm is not differentiable where the decoder equals its snapshot
    for name in store.names(DECODER):
        store.set(name, store[name] + rng.normal(0.0, 0.05, size=store[name].shape))
    starts = _random_states(layout, (settings.batch_size,), rng)
    commands = np.stack([
        rng.uniform(0.0, 1.5, size=(settings.batch_size, steps)),
        rng.uniform(-1.5, 1.5, size=(settings.batch_size, steps)),
    ], axis=-1)

    def loss(params: Mapping[str, Tensor]) -> Tensor:
        return policy.cf_policy_loss(
            params, world_model, starts, commands, np.random.default_rng(seed), include_reg=True,
        ).loss

    return _check(loss, store, policy.trainable('finetune'), settings, seed)


def run_case(case: str, seed: int, settings: GradCheckSettings | None = None) -> CaseResult:
    match case.split('-'):
        case ['world', steps]:
            report = check_world_loss(int(steps.removeprefix('n')), seed, settings)
        case ['mt', steps]:
            report = check_tracking_loss(int(steps.removeprefix('n')), seed, settings)
        case ['cf', 'reg', steps]:
            report = check_command_loss(int(steps.removeprefix('n')), seed, settings)
        case _:
            raise ValueError(f'unknown gradient case {case!r}')
    result = CaseResult(case, seed, report)
    status = 'passed' if result.passed else 'FAILED'
    _logger.info(f'{case} seed {seed}: {status}, max relative error {report.max_rel_error:.3e}')
    return result


def gradient_suite(
    seeds: Iterable[int] = range(5),
    cases: Iterable[str] = GRADIENT_CASES,
    settings: GradCheckSettings | None = None,
) -> list[CaseResult]:
    """Run every case for every seed."""
    cases = list(cases)
    return [run_case(case, seed, settings) for seed in seeds for case in cases]
