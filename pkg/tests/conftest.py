from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

from worldwalk.envsim import StateLayout

if TYPE_CHECKING:
    from pathlib import Path

# small enough that a full training phase runs in seconds
TINY_RUN = (
    'env.joints=4',
    'nets.world_hidden=[8]',
    'nets.policy_hidden=[8]',
    'nets.latent_dim=2',
    'train.iterations=1',
    'train.samples=40',
    'train.episode_length=20',
    'train.world_updates=2',
    'train.policy_updates=2',
    'train.batch_size=4',
    'train.rollout=2',
    'train.buffer_capacity=1000',
    'train.clip_speeds=[0.6]',
    'train.clip_turns=[0.0]',
    'train.clip_duration=2.0',
    'train.eval_duration=1.0',
    'train.hold_min=0.2',
    'train.hold_max=0.4',
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def layout() -> StateLayout:
    return StateLayout(4)


@pytest.fixture
def tiny_overrides(tmp_path: Path) -> list[str]:
    return [*TINY_RUN, f'output_dir="{tmp_path.as_posix()}"']
