from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING, NoReturn

from rich.console import Console
from rich.table import Table

from .buffer import ReplayBuffer
from .checkpoint import load_checkpoint
from .config import load_run_config, save_run_config, save_settings
from .envsim import CONTROL_DT, ENVIRONMENTS, ReferenceClip, scripted_gait_reference
from .errors import ConfigError, GradientCheckError
from .gradcheck import GRADIENT_CASES, gradient_suite
from .helpers import did_you_mean, setup_logging, write_csv
from .pathcmd import PATH_KINDS, make_path
from .repro import available_bundles, run_bundle
from .trainer import (
    TRAJECTORY_HEADER,
    Session,
    co_train_mt,
    evaluate_path,
    fine_tune,
    off_policy_finetune,
    train_cf,
)

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from .config import RunConfig
    from .envsim import PhysicalParams
    from .trainer import TrainResult

_logger = logging.getLogger('worldwalk.cli')
console = Console()

COMMANDS = (
    'gen-ref', 'train-mt', 'train-cf', 'finetune', 'offpolicy-finetune', 'eval-path', 'gradcheck', 'repro',
)


def _run_config(args: argparse.Namespace) -> RunConfig:
    """Load and validate the configuration, start logging and materialize it in the output directory.

    ``config.toml`` keeps the setting descriptions as comments; ``config.json`` is the validated run configuration.
    """
    config, settings = load_run_config(args.config, args.overrides)
    setup_logging(config.output_path / 'logs', debug=config.debug or args.debug)
    save_settings(settings, config.output_path / 'config.toml')
    save_run_config(config, config.output_path / 'config.json')
    return config


def _physical_params(args: argparse.Namespace, config: RunConfig) -> PhysicalParams:
    if getattr(args, 'env', None):
        return ENVIRONMENTS[args.env]
    return config.env.physical_params()


def _session(args: argparse.Namespace, config: RunConfig) -> Session:
    return Session.from_checkpoint(load_checkpoint(args.checkpoint), config)


def _report(result: TrainResult) -> None:
    if result.history:
        last = result.history[-1]
        console.print(', '.join(f'{key}={value:.4f}' for key, value in last.items() if isinstance(value, float)))
    console.print(f'checkpoint: {result.checkpoint.as_posix()}')
    console.print(f'log: {result.csv.as_posix()}')


def gen_ref(args: argparse.Namespace) -> None:
    config = _run_config(args)
    speed = config.path.speed if args.speed is None else args.speed
    duration = config.train.clip_duration if args.duration is None else args.duration
    clip = scripted_gait_reference(
        speed, args.turn, duration, ENVIRONMENTS[args.env or 'original'],
        joints=config.env.joints, substeps=config.env.substeps,
    )
    output = args.output or config.output_path / 'clips' / f'ref-v{speed}-t{args.turn}.json'
    clip.save(output)
    console.print(f'{len(clip)} frames written to {output.as_posix()}')


def train_mt(args: argparse.Namespace) -> None:
    config = _run_config(args)
    clips = [ReferenceClip.load(path) for path in args.clips] if args.clips else None
    _report(co_train_mt(config, _physical_params(args, config), clips))


def train_cf_command(args: argparse.Namespace) -> None:
    config = _run_config(args)
    _report(train_cf(config, _physical_params(args, config), _session(args, config)))


def finetune(args: argparse.Namespace) -> None:
    config = _run_config(args)
    _report(fine_tune(config, _physical_params(args, config), _session(args, config)))


def offpolicy_finetune(args: argparse.Namespace) -> None:
    config = _run_config(args)
    buffers = [ReplayBuffer.load(path) for path in args.buffers]
    _report(off_policy_finetune(config, buffers, _session(args, config), _physical_params(args, config)))


def eval_path(args: argparse.Namespace) -> None:
    config = _run_config(args)
    kind = args.path or config.path.kind
    pursuit = config.path.pursuit()
    if args.speed is not None:
        pursuit = pursuit.model_copy(update={'speed': args.speed})
    duration = config.train.eval_duration if args.duration is None else args.duration
    session = _session(args, config)
    result = evaluate_path(
        session, _physical_params(args, config), make_path(kind, config.path.scale), pursuit, duration,
        substeps=config.env.substeps,
    )

    eval_dir, stem = config.output_path / 'eval', f'{kind}-{pursuit.speed}'
    write_csv(eval_dir / f'{stem}.csv', TRAJECTORY_HEADER, result.trajectory_rows())
    row = {'path': kind, 'speed': pursuit.speed, 'steps': len(result.commands), **result.as_row()}
    write_csv(eval_dir / f'{stem}.metrics.csv', tuple(row), [row])

    table = Table(title=f'{kind} at {pursuit.speed} m/s, {len(result.commands) * CONTROL_DT:.1f} s')
    for column in ('e_v', 'e_omega', 'e_p', 'env_cf_loss'):
        table.add_column(column, justify='right')
    table.add_row(*(f'{row[column]:.4f}' for column in ('e_v', 'e_omega', 'e_p', 'env_cf_loss')))
    console.print(table)


def gradcheck(args: argparse.Namespace) -> None:
    config = _run_config(args)
    results = gradient_suite(range(config.seed, config.seed + args.seeds), args.cases or GRADIENT_CASES)
    rows = [result.as_row() for result in results]
    write_csv(config.output_path / 'gradcheck.csv', tuple(rows[0]), rows)

    table = Table(title='Finite-difference gradient check')
    for column in ('case', 'seed', 'max relative error', 'worst parameter', 'result'):
        table.add_column(column)
    for result, row in zip(results, rows, strict=True):
        status = '[green]pass[/green]' if result.passed else '[red]FAIL[/red]'
        table.add_row(result.case, str(result.seed), f'{row["max_rel_error"]:.2e}', str(row['worst_param']), status)
    console.print(table)

    failed = [f'{result.case}/seed {result.seed}' for result in results if not result.passed]
    if failed:
        raise GradientCheckError(f'{len(failed)} of {len(results)} checks failed: {", ".join(failed)}')


def repro(args: argparse.Namespace) -> None:
    if args.list or args.bundle is None:
        table = Table(title='Bundles')
        table.add_column('id', no_wrap=True)
        table.add_column('aliases', no_wrap=True)
        table.add_column('description')
        for bundle in available_bundles().values():
            table.add_row(bundle.id, ', '.join(bundle.aliases), bundle.description)
        console.print(table)
        return
    config, _ = load_run_config(args.config, args.overrides)
    setup_logging(config.output_path / 'logs', debug=config.debug or args.debug)
    result = run_bundle(args.bundle, args.config, args.overrides)
    for path in result.files:
        console.print(path.as_posix())


class ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors as :class:`ConfigError` so they print as one line and exit with 2."""

    def error(self, message: str) -> NoReturn:
        raise ConfigError(f'{self.prog}: {message}')


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument(
        '-c', '--config',
        type=Path,
        help='specify a TOML or JSON settings file to load on top of the defaults',
        metavar='<path>',
    )
    common.add_argument(
        '-o', '--override',
        action='append',
        default=[],
        help='override a setting by its dotted path, for example env.mass=8.74',
        metavar='<key=value>',
        dest='overrides',
    )
    common.add_argument(
        '-d', '--debug',
        action='store_true',
        help='enable debug logging',
    )

    parser = ArgumentParser(prog='worldwalk')
    commands = parser.add_subparsers(dest='command', required=True, metavar='<command>')

    def command(name: str, handler: Callable[[argparse.Namespace], None], help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    def add_env(sub: argparse.ArgumentParser) -> None:
        sub.add_argument(
            '-e', '--env',
            choices=tuple(ENVIRONMENTS),
            help='use a named environment instead of the configured physical parameters',
        )

    def add_checkpoint(sub: argparse.ArgumentParser) -> None:
        sub.add_argument('--checkpoint', type=Path, required=True, help='checkpoint to start from', metavar='<path>')

    sub = command('gen-ref', gen_ref, 'record a scripted-gait reference clip')
    sub.add_argument('--speed', type=float, help='gait speed in m/s, the configured path speed by default')
    sub.add_argument('--turn', type=float, default=0.0, help='turn rate of the gait')
    sub.add_argument('--duration', type=float, help='clip length in seconds')
    sub.add_argument('--output', type=Path, help='clip file to write', metavar='<path>')
    add_env(sub)

    sub = command('train-mt', train_mt, 'co-train the world model and the motion-tracking policy from scratch')
    sub.add_argument('--clips', nargs='+', type=Path, help='reference clip files to track', metavar='<path>')
    add_env(sub)

    sub = command('train-cf', train_cf_command, 'train the command-following encoder')
    add_checkpoint(sub)
    add_env(sub)

    sub = command('finetune', finetune, 'fine-tune the command-following policy online')
    add_checkpoint(sub)
    add_env(sub)

    sub = command('offpolicy-finetune', offpolicy_finetune, 'fine-tune from stored replay buffers')
    add_checkpoint(sub)
    sub.add_argument('--buffers', nargs='+', type=Path, required=True, help='replay buffer files', metavar='<path>')
    add_env(sub)

    sub = command('eval-path', eval_path, 'follow an evaluation path and write its trajectory and errors')
    add_checkpoint(sub)
    sub.add_argument('--path', choices=PATH_KINDS, help='path to follow, the configured one by default')
    sub.add_argument('--speed', type=float, help='target speed in m/s')
    sub.add_argument('--duration', type=float, help='rollout length in seconds')
    add_env(sub)

    sub = command('gradcheck', gradcheck, 'check every loss gradient against finite differences')
    sub.add_argument('--seeds', type=int, default=5, help='number of seeds, starting at the configured seed')
    sub.add_argument('--case', action='append', choices=GRADIENT_CASES, dest='cases', help='run only this case')

    sub = command('repro', repro, 'run a named experiment bundle')
    sub.add_argument('bundle', nargs='?', help='bundle id')
    sub.add_argument('--list', action='store_true', help='list the available bundles')
    return parser


def _fail(error: BaseException) -> None:
    message = ' '.join(str(error).split())
    print(f'error: {type(error).__name__}: {message}', file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and not argv[0].startswith('-') and argv[0] not in COMMANDS:
        _fail(ConfigError(f'unknown command {argv[0]!r}{did_you_mean(argv[0], COMMANDS)}'))
        return 2
    try:
        args = parser.parse_args(argv)
        args.handler(args)
    except ConfigError as error:
        _fail(error)
        return 2
    except Exception as error:  # noqa: BLE001
        _logger.debug('Command failed', exc_info=error)
        _fail(error)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
