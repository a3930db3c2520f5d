from __future__ import annotations

from typing import TYPE_CHECKING

import pytest

from worldwalk.__main__ import main
from worldwalk.config import RunConfig, load_run_config
from worldwalk.helpers import read_csv
from worldwalk.trainer import TRAJECTORY_HEADER

if TYPE_CHECKING:
    from pathlib import Path


def _options(overrides: list[str]) -> list[str]:
    return [argument for override in overrides for argument in ('-o', override)]


def test_gradcheck_command(tmp_path: Path) -> None:
    argv = ['gradcheck', '--case', 'world-n1', '--seeds', '1', '-o', f'output_dir="{tmp_path.as_posix()}"']
    assert main(argv) == 0
    rows = read_csv(tmp_path / 'gradcheck.csv')
    assert [(row['case'], row['passed']) for row in rows] == [('world-n1', 'True')]
    assert (tmp_path / 'config.toml').is_file()

    saved = tmp_path / 'config.json'
    config = RunConfig.model_validate_json(saved.read_text(encoding='utf-8'))
    assert config.output_dir == tmp_path.as_posix()
    assert load_run_config(saved, environ={})[0] == config


def test_unknown_command(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(['trian-mt']) == 2
    error = capsys.readouterr().err
    assert error.startswith('error: ConfigError:')
    assert "did you mean 'train-mt'" in error


def test_missing_config_file(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(['train-mt', '-c', (tmp_path / 'missing.toml').as_posix()]) == 2
    assert 'config file not found' in capsys.readouterr().err


def test_unknown_setting(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(['gradcheck', '-o', 'env.mas=3']) == 2
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_usage_error_is_one_line(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(['eval-path', '--path', 'oblong']) == 2
    error = capsys.readouterr().err.strip()
    assert error.startswith('error: ConfigError: worldwalk eval-path:')
    assert '--checkpoint' in error
    assert len(error.splitlines()) == 1


def test_list_bundles(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(['repro', '--list']) == 0
    out = capsys.readouterr().out
    assert 'fig3c-env2' in out
    assert 'finetune-env2' in out


def test_runtime_failure_exits_one(tiny_overrides: list[str], tmp_path: Path) -> None:
    argv = ['offpolicy-finetune', '--checkpoint', (tmp_path / 'none.json').as_posix(), '--buffers', 'none.json']
    assert main([*argv, *_options(tiny_overrides)]) == 1


def test_train_then_evaluate(tiny_overrides: list[str], tmp_path: Path) -> None:
    assert main(['gen-ref', '--speed', '0.6', '--duration', '1.0', *_options(tiny_overrides)]) == 0
    clip = tmp_path / 'clips' / 'ref-v0.6-t0.0.json'
    assert clip.is_file()

    assert main(['train-mt', '--clips', clip.as_posix(), *_options(tiny_overrides)]) == 0
    checkpoint = tmp_path / 'checkpoints' / 'mt-scratch.json'
    assert checkpoint.is_file()

    argv = ['eval-path', '--checkpoint', checkpoint.as_posix(), '--path', 'star', '--speed', '0.6', '--env', 'env2']
    assert main([*argv, *_options(tiny_overrides)]) == 0
    rows = read_csv(tmp_path / 'eval' / 'star-0.6.csv')
    assert len(rows) == 50
    assert tuple(rows[0]) == TRAJECTORY_HEADER
    metrics = read_csv(tmp_path / 'eval' / 'star-0.6.metrics.csv')
    assert metrics[0]['path'] == 'star'
