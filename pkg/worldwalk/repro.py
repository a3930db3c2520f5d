"""Named experiment bundles that chain the training phases into complete, seeded experiments.

Each bundle is a TOML manifest under ``worldwalk/bundles``. Shared pretraining stages (motion-tracking co-training,
then command-following training at nominal physics) are cached under ``<output_dir>/stages/<fingerprint>`` and reused
by every bundle whose pretraining configuration matches.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

import pydantic

from .checkpoint import load_checkpoint
from .config import load_run_config, load_toml, save_run_config, save_settings
from .envsim import ENVIRONMENTS, MAX_GAIT_SPEED
from .errors import ConfigError
from .helpers import did_you_mean, write_csv
from .pathcmd import PATH_KINDS, make_path
from .trainer import (
    Session,
    co_train_mt,
    evaluate_path,
    fine_tune,
    fine_tune_mt,
    off_policy_finetune,
    train_cf,
)

if TYPE_CHECKING:
    from collections.abc import Callable, Mapping, Sequence

    from .buffer import ReplayBuffer
    from .config import RunConfig, SettingsGroup
    from .envsim import PhysicalParams
    from .trainer import TrainResult

_logger = logging.getLogger('worldwalk.repro')

BUNDLES_DIR = Path(__file__).parent / 'bundles'

SWEEP_HEADER = ('speed', 'iteration', 'samples_total', 'world_loss', 'cf_loss', 'e_v', 'e_omega', 'e_p', 'env_cf_loss')
GENERALIZATION_HEADER = ('policy', 'path', 'speed', 'e_v', 'e_omega', 'e_p', 'env_cf_loss')


# noinspection PyNestedDecorators
class BundleManifest(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra='forbid')

    id: pydantic.constr(
        strip_whitespace=True,
        min_length=1,
        max_length=32,
        pattern=r'^[a-z0-9][a-z0-9-]*$',
    )
    aliases: list[pydantic.constr(pattern=r'^[a-z0-9][a-z0-9-]*$', max_length=32)] = []
    name: pydantic.constr(strip_whitespace=True, min_length=1, max_length=64)
    description: pydantic.constr(strip_whitespace=True, max_length=256) = ''
    runner: Literal['co-train-mt', 'finetune-mt', 'finetune', 'speed-sweep', 'generalization']
    env: str = 'original'
    speeds: list[pydantic.PositiveFloat] = []
    eval_speeds: list[pydantic.PositiveFloat] = []
    overrides: list[str] = []
    pretrain_overrides: list[str] = []

    @pydantic.field_validator('env')
    @classmethod
    def check_env(cls, value: str) -> str:
        if value not in ENVIRONMENTS:
            raise ValueError(f'unknown environment {value!r}{did_you_mean(value, ENVIRONMENTS)}')
        return value

    @pydantic.field_validator('speeds', 'eval_speeds')
    @classmethod
    def check_speeds(cls, values: list[float]) -> list[float]:
        if any(value > MAX_GAIT_SPEED for value in values):
            raise ValueError(f'speeds must not exceed {MAX_GAIT_SPEED} m/s')
        return values

    @pydantic.model_validator(mode='after')
    def check_runner_fields(self) -> BundleManifest:
        if self.runner in ('speed-sweep', 'generalization') and not self.speeds:
            raise ValueError(f'runner {self.runner!r} needs a list of speeds')
        if self.runner == 'generalization' and not self.eval_speeds:
            raise ValueError("runner 'generalization' needs a list of evaluation speeds")
        return self

    @property
    def physical_params(self) -> PhysicalParams:
        return ENVIRONMENTS[self.env]


def parse_manifest(manifest: Mapping[str, Any]) -> BundleManifest:
    """Validate a bundle manifest document.

    :raises ConfigError: If the manifest version is unknown or a field is invalid.
    """
    match manifest:
        case {'manifest_version': 1, 'bundle': dict(data)}:
            try:
                return BundleManifest(**data)
            except pydantic.ValidationError as error:
                first = error.errors()[0]
                location = '.'.join(str(part) for part in first['loc'])
                detail = first['msg'].removeprefix('Value error, ')
                raise ConfigError(f'bundle {data.get("id", "?")}: {location}: {detail}') from error
        case _:
            raise ConfigError('invalid bundle manifest version')


def available_bundles(bundles_dir: Path = BUNDLES_DIR) -> dict[str, BundleManifest]:
    bundles = {}
    for manifest_path in sorted(bundles_dir.glob('*.toml')):
        bundle = parse_manifest(load_toml(manifest_path))
        if bundle.id != manifest_path.stem:
            raise ConfigError(f'bundle id {bundle.id!r} does not match its file name {manifest_path.name}')
        bundles[bundle.id] = bundle
    names = [name for bundle in bundles.values() for name in (bundle.id, *bundle.aliases)]
    if duplicates := sorted({name for name in names if names.count(name) > 1}):
        raise ConfigError(f'bundle names used more than once: {", ".join(duplicates)}')
    return bundles


def get_bundle(bundle_id: str, bundles_dir: Path = BUNDLES_DIR) -> BundleManifest:
    """Look a bundle up by its id or one of its aliases.

    :raises ConfigError: If no bundle has that name, with a suggestion for the closest one.
    """
    bundles = available_bundles(bundles_dir)
    names = {name: bundle for bundle in bundles.values() for name in (bundle.id, *bundle.aliases)}
    if bundle_id not in names:
        raise ConfigError(f'unknown bundle {bundle_id!r}{did_you_mean(bundle_id, names)}')
    return names[bundle_id]


def config_fingerprint(config: RunConfig) -> str:
    """A short digest of every setting except the output directory."""
    document = config.model_dump(exclude={'output_dir', 'debug'})
    return hashlib.sha256(json.dumps(document, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class ReproResult:
    bundle: BundleManifest
    output_dir: Path
    files: list[Path] = field(default_factory=list)


class BundleRunner:
    """Runs one bundle: resolves configurations, reuses cached pretraining stages and writes the bundle outputs."""

    def __init__(
        self,
        bundle: BundleManifest,
        config_path: Path | None = None,
        overrides: Sequence[str] = (),
        environ: Mapping[str, str] | None = None,
    ) -> None:
        self.bundle = bundle
        self.config_path = config_path
        self.overrides = list(overrides)
        self.environ = environ
        base, _ = self._load()
        self.base_dir = base.output_path
        self.output_dir = self.base_dir / bundle.id
        self.result = ReproResult(bundle, self.output_dir)

    def _load(self, *extra: str, pretrain: bool = False) -> tuple[RunConfig, SettingsGroup]:
        own = self.bundle.pretrain_overrides if pretrain else self.bundle.overrides
        return load_run_config(self.config_path, [*own, *self.overrides, *extra], self.environ)

    def config(self, output_dir: Path, *extra: str, pretrain: bool = False) -> RunConfig:
        """The bundle configuration writing to ``output_dir``, materialized there as TOML and JSON.

        :param pretrain: Use the pretraining overrides instead of the bundle's own.
        """
        config, settings = self._load(*extra, f'output_dir={json.dumps(output_dir.as_posix())}', pretrain=pretrain)
        save_settings(settings, output_dir / 'config.toml')
        save_run_config(config, output_dir / 'config.json')
        return config

    def _pretrain_config(self) -> RunConfig:
        probe, _ = self._load(pretrain=True)
        return self.config(self.base_dir / 'stages' / config_fingerprint(probe), pretrain=True)

    def _stage(self, config: RunConfig, phase: str, train: Callable[[], object]) -> Path:
        checkpoint = config.output_path / 'checkpoints' / f'{phase}.json'
        if checkpoint.is_file():
            _logger.info(f'Reusing cached {phase} stage {checkpoint.as_posix()}')
            return checkpoint
        _logger.info(f'Running the {phase} stage in {config.output_path.as_posix()}')
        train()
        return checkpoint

    def motion_tracking_checkpoint(self) -> Path:
        config = self._pretrain_config()
        return self._stage(config, 'mt-scratch', lambda: co_train_mt(config, ENVIRONMENTS['original']))

    def command_following_checkpoint(self) -> Path:
        config = self._pretrain_config()
        mt_checkpoint = self.motion_tracking_checkpoint()

        def train() -> None:
            session = Session.from_checkpoint(load_checkpoint(mt_checkpoint), config)
            train_cf(config, ENVIRONMENTS['original'], session)

        return self._stage(config, 'cf-scratch', train)

    @staticmethod
    def session(checkpoint: Path, config: RunConfig) -> Session:
        return Session.from_checkpoint(load_checkpoint(checkpoint), config)

    def run(self) -> ReproResult:
        _logger.info(f'Running bundle {self.bundle.id}: {self.bundle.name}')
        match self.bundle.runner:
            case 'co-train-mt':
                self._co_train_mt()
            case 'finetune-mt':
                self._fine_tune_mt()
            case 'finetune':
                self._fine_tune()
            case 'speed-sweep':
                self._speed_sweep()
            case 'generalization':
                self._generalization()
        _logger.info(f'Bundle {self.bundle.id} wrote {len(self.result.files)} files to {self.output_dir.as_posix()}')
        return self.result

    def _co_train_mt(self) -> None:
        config = self.config(self.output_dir)
        result = co_train_mt(config, self.bundle.physical_params)
        self.result.files += [result.csv, result.checkpoint]

    def _fine_tune_mt(self) -> None:
        checkpoint = self.motion_tracking_checkpoint()
        config = self.config(self.output_dir)
        result = fine_tune_mt(config, self.bundle.physical_params, self.session(checkpoint, config))
        self.result.files += [result.csv, result.checkpoint]

    def _fine_tune(self) -> None:
        checkpoint = self.command_following_checkpoint()
        config = self.config(self.output_dir)
        result = fine_tune(config, self.bundle.physical_params, self.session(checkpoint, config))
        self.result.files += [result.csv, result.checkpoint]

    def _fine_tune_at(self, checkpoint: Path, speed: float) -> tuple[TrainResult, RunConfig]:
        config = self.config(self.output_dir / f'speed-{speed}', f'path.speed={speed}')
        result = fine_tune(config, self.bundle.physical_params, self.session(checkpoint, config))
        self.result.files += [result.csv, result.checkpoint]
        return result, config

    def _speed_sweep(self) -> None:
        checkpoint = self.command_following_checkpoint()
        rows = []
        for speed in self.bundle.speeds:
            result, _ = self._fine_tune_at(checkpoint, speed)
            rows += [{'speed': speed, **{column: row[column] for column in SWEEP_HEADER[1:]}} for row in result.history]
        self.result.files.append(write_csv(self.output_dir / f'{self.bundle.id}.csv', SWEEP_HEADER, rows))

    def _generalization(self) -> None:
        checkpoint = self.command_following_checkpoint()
        buffers: list[ReplayBuffer] = []
        for speed in self.bundle.speeds:
            result, config = self._fine_tune_at(checkpoint, speed)
            buffers.append(result.buffer)
            self.result.files.append(config.output_path / 'buffer.json')

        config = self.config(self.output_dir / 'offpolicy')
        adapted = off_policy_finetune(config, buffers, self.session(checkpoint, config), self.bundle.physical_params)
        self.result.files += [adapted.csv, adapted.checkpoint]

        policies = {'origin': self.session(checkpoint, config), 'adapted': adapted.session}
        rows = []
        for policy, session in policies.items():
            for kind in PATH_KINDS:
                path = make_path(kind, config.path.scale)
                for speed in self.bundle.eval_speeds:
                    pursuit = config.path.pursuit().model_copy(update={'speed': speed})
                    evaluation = evaluate_path(
                        session, self.bundle.physical_params, path, pursuit, config.train.eval_duration,
                        substeps=config.env.substeps,
                    )
                    rows.append({'policy': policy, 'path': kind, 'speed': speed, **evaluation.as_row()})
        self.result.files.append(write_csv(self.output_dir / f'{self.bundle.id}.csv', GENERALIZATION_HEADER, rows))


def run_bundle(
    bundle_id: str,
    config_path: Path | None = None,
    overrides: Sequence[str] = (),
    environ: Mapping[str, str] | None = None,
) -> ReproResult:
    """Run a named bundle; CLI overrides apply on top of the bundle's own overrides."""
    return BundleRunner(get_bundle(bundle_id), config_path, overrides, environ).run()
