from __future__ import annotations

import json
import logging
import math
from typing import TYPE_CHECKING, Any

import numpy as np
import pydantic
from packaging.version import InvalidVersion, Version

from .autodiff import AdamState, ParamStore
from .errors import CheckpointError

if TYPE_CHECKING:
    from collections.abc import Mapping
    from pathlib import Path

_logger = logging.getLogger('worldwalk.checkpoint')

CHECKPOINT_FORMAT = Version('1.0')
PHASES = ('init', 'mt-scratch', 'mt-finetune', 'cf-scratch', 'finetune', 'offpolicy')


class TensorRecord(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra='forbid')

    shape: list[pydantic.NonNegativeInt]
    data: list[float]


class AdamRecord(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra='forbid')

    m: list[float]
    v: list[float]
    step: pydantic.NonNegativeInt = 0


class Architecture(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra='forbid')

    joints: pydantic.PositiveInt
    world_hidden: list[pydantic.PositiveInt]
    policy_hidden: list[pydantic.PositiveInt]
    latent_dim: pydantic.PositiveInt
    sigma: pydantic.PositiveFloat
    window: pydantic.PositiveInt


# noinspection PyNestedDecorators
class Checkpoint(pydantic.BaseModel):
    """Everything needed to resume training: parameters, optimizer moments and world-model normalization."""

    model_config = pydantic.ConfigDict(extra='forbid')

    format_version: str
    phase: str
    iteration: pydantic.NonNegativeInt
    seed: int
    samples_total: pydantic.NonNegativeInt = 0
    architecture: Architecture
    normalization: dict[str, Any]
    tensors: dict[str, TensorRecord]
    optimizer: dict[str, AdamRecord] = {}

    @pydantic.field_validator('format_version')
    @classmethod
    def check_version(cls, value: str) -> str:
        try:
            version = Version(value)
        except InvalidVersion as error:
            raise ValueError(f'invalid checkpoint format version {value!r}') from error
        if version.major != CHECKPOINT_FORMAT.major or version > CHECKPOINT_FORMAT:
            raise ValueError(f'checkpoint format {value} is not compatible with {CHECKPOINT_FORMAT}')
        return value

    @pydantic.field_validator('phase')
    @classmethod
    def check_phase(cls, value: str) -> str:
        if value not in PHASES:
            raise ValueError(f'unknown phase {value!r}')
        return value

    @pydantic.model_validator(mode='after')
    def check_tensors(self) -> Checkpoint:
        for name, record in self.tensors.items():
            if math.prod(record.shape) != len(record.data):
                raise ValueError(f'tensor {name!r}: shape {record.shape} does not hold {len(record.data)} values')
            if not all(math.isfinite(value) for value in record.data):
                raise ValueError(f'tensor {name!r} contains non-finite values')
        for name, record in self.optimizer.items():
            if name not in self.tensors:
                raise ValueError(f'optimizer state for unknown tensor {name!r}')
            size = len(self.tensors[name].data)
            if len(record.m) != size or len(record.v) != size:
                raise ValueError(f'optimizer state of tensor {name!r} does not match its size')
        return self

    @classmethod
    def from_store(
        cls,
        store: ParamStore,
        *,
        phase: str,
        iteration: int,
        seed: int,
        architecture: Architecture,
        normalization: Mapping[str, Any],
        samples_total: int = 0,
    ) -> Checkpoint:
        tensors, optimizer = {}, {}
        for name in store:
            array = store[name]
            tensors[name] = TensorRecord(shape=list(array.shape), data=array.ravel().tolist())
            state = store.adam_state(name)
            optimizer[name] = AdamRecord(m=state.m.ravel().tolist(), v=state.v.ravel().tolist(), step=state.step)
        return cls(
            format_version=str(CHECKPOINT_FORMAT),
            phase=phase,
            iteration=iteration,
            seed=seed,
            samples_total=samples_total,
            architecture=architecture,
            normalization=dict(normalization),
            tensors=tensors,
            optimizer=optimizer,
        )

    def to_store(self, expected: Mapping[str, tuple[int, ...]] | None = None) -> ParamStore:
        """Rebuild the parameter store, checking names and shapes against ``expected`` when given.

        :raises CheckpointError: Naming a missing tensor or one whose shape differs from the expected one.
        """
        if expected is not None:
            for name, shape in expected.items():
                if name not in self.tensors:
                    raise CheckpointError(f'checkpoint is missing tensor {name!r}')
                if tuple(self.tensors[name].shape) != tuple(shape):
                    raise CheckpointError(
                        f'tensor {name!r} has shape {self.tensors[name].shape}, expected {list(shape)}',
                    )
        store = ParamStore()
        for name, record in self.tensors.items():
            store.add(name, np.asarray(record.data, dtype=np.float64).reshape(record.shape))
            if name in self.optimizer:
                adam = self.optimizer[name]
                store.set_adam_state(name, AdamState(
                    m=np.asarray(adam.m, dtype=np.float64).reshape(record.shape),
                    v=np.asarray(adam.v, dtype=np.float64).reshape(record.shape),
                    step=adam.step,
                ))
        return store

    def dumps(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, separators=(',', ':'))


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    temporary = path.with_suffix(path.suffix + '.tmp')
    temporary.write_text(checkpoint.dumps(), encoding='utf-8')
    temporary.replace(path)
    _logger.debug(f'Saved {checkpoint.phase} checkpoint (iteration {checkpoint.iteration}) to {path.as_posix()}')
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Read and validate a checkpoint file.

    :raises CheckpointError: If the file is unreadable, not JSON, of an incompatible format version, or internally
        inconsistent.
    """
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as error:
        raise CheckpointError(f'cannot read checkpoint {path.as_posix()}: {error.strerror}') from error
    try:
        return Checkpoint.model_validate_json(text)
    except pydantic.ValidationError as error:
        first = error.errors()[0]
        location = '.'.join(str(part) for part in first['loc'])
        detail = first['msg'].removeprefix('Value error, ')
        prefix = f'{location}: ' if location else ''
        raise CheckpointError(f'invalid checkpoint {path.as_posix()}: {prefix}{detail}') from error
