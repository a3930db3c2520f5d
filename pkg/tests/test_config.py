from __future__ import annotations

import json
from typing import TYPE_CHECKING

import pytest

from worldwalk.config import (
    SEED_VARIABLE,
    RunConfig,
    load_config_file,
    load_run_config,
    load_settings,
    parse_override,
    save_settings,
)
from worldwalk.errors import ConfigError

if TYPE_CHECKING:
    from pathlib import Path


def test_schema_defaults() -> None:
    config, _ = load_run_config(environ={})
    assert config.seed == 0
    assert config.env.mass == 5.74
    assert config.env.layout.size == 30
    assert config.nets.world_hidden == [256, 256]
    assert config.path.kind == 'oblong'
    assert config.policy_config().sigma == 0.3


def test_schema_descriptions_are_kept() -> None:
    settings = load_settings(environ={})
    assert settings.env.mass.description == 'Base mass in kg'
    assert 'seed' in settings.setting_ids()


@pytest.mark.parametrize(
    ('override', 'expected'),
    [
        ('env.mass=14', ('env.mass', 14)),
        ('nets.world_hidden=[8, 8]', ('nets.world_hidden', [8, 8])),
        ('debug=true', ('debug', True)),
        ('path.kind="star"', ('path.kind', 'star')),
        ('path.kind=star', ('path.kind', 'star')),
        (' train.world_lr = 1e-3 ', ('train.world_lr', 1e-3)),
    ],
)
def test_parse_override(override: str, expected: tuple[str, object]) -> None:
    assert parse_override(override) == expected


@pytest.mark.parametrize('override', ['env.mass', '=3'])
def test_malformed_override(override: str) -> None:
    with pytest.raises(ConfigError, match='key=value'):
        parse_override(override)


def test_overrides_apply_and_coerce_ints() -> None:
    config, _ = load_run_config(overrides=['env.mass=14', 'path.kind=star'], environ={})
    assert config.env.mass == 14.0
    assert isinstance(config.env.mass, float)
    assert config.path.kind == 'star'


def test_unknown_key_suggests_a_match() -> None:
    with pytest.raises(ConfigError, match="did you mean 'env.mass'"):
        load_settings(overrides=['env.mas=3'], environ={})
    with pytest.raises(ConfigError, match='unknown setting'):
        load_settings(overrides=['bogus.mass=3'], environ={})


def test_wrong_type_is_rejected() -> None:
    with pytest.raises(ConfigError, match="setting 'env.mass'"):
        load_settings(overrides=['env.mass="heavy"'], environ={})


def test_seed_variable_takes_precedence() -> None:
    config, settings = load_run_config(overrides=['seed=3'], environ={SEED_VARIABLE: '7'})
    assert config.seed == 7
    assert settings.seed.value == 7
    with pytest.raises(ConfigError, match=SEED_VARIABLE):
        load_settings(environ={SEED_VARIABLE: 'seven'})


@pytest.mark.parametrize(
    ('override', 'location'),
    [
        ('env.joints=3', 'env'),
        ('path.kind="circle"', 'path.kind'),
        ('path.speed=3.0', 'path'),
        ('train.hold_min=9.0', 'train'),
        ('train.clip_speeds=[2.0]', 'train'),
    ],
)
def test_invalid_values_name_their_location(override: str, location: str) -> None:
    settings = load_settings(overrides=[override], environ={})
    with pytest.raises(ConfigError, match=f'^{location}'):
        RunConfig.from_settings(settings)


def test_json_config_file(tmp_path: Path) -> None:
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'seed': 5, 'env': {'mass': 9.0}}), encoding='utf-8')
    config, _ = load_run_config(path, overrides=['seed=6'], environ={})
    assert (config.seed, config.env.mass) == (6, 9.0)


def test_toml_config_file(tmp_path: Path) -> None:
    path = tmp_path / 'run.toml'
    path.write_text('output_dir = "elsewhere"\n\n[train]\niterations = 3\n', encoding='utf-8')
    config, _ = load_run_config(path, environ={})
    assert config.output_dir == 'elsewhere'
    assert config.train.iterations == 3


def test_config_file_errors(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match='not found'):
        load_config_file(tmp_path / 'missing.toml')

    yaml = tmp_path / 'run.yaml'
    yaml.write_text('seed: 1\n', encoding='utf-8')
    with pytest.raises(ConfigError, match='.toml or .json'):
        load_config_file(yaml)

    broken = tmp_path / 'broken.json'
    broken.write_text('{"seed": ', encoding='utf-8')
    with pytest.raises(ConfigError, match='cannot parse'):
        load_config_file(broken)

    listing = tmp_path / 'list.json'
    listing.write_text('[1, 2]', encoding='utf-8')
    with pytest.raises(ConfigError, match='table'):
        load_config_file(listing)


def test_saved_settings_reload_identically(tmp_path: Path) -> None:
    settings = load_settings(overrides=['env.mass=14', 'nets.world_hidden=[8]'], environ={})
    path = save_settings(settings, tmp_path / 'config.toml')
    assert '# Base mass in kg' in path.read_text(encoding='utf-8')
    assert load_settings(path, environ={}).as_dict() == settings.as_dict()
