from __future__ import annotations

import json
import os
from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING, Any, Generic, Literal, TypeVar, cast, overload

import pydantic
import tomlkit
import tomlkit.items
from tomlkit import TOMLDocument
from tomlkit.exceptions import ParseError
from tomlkit.items import Comment, Item, Key, Table, Whitespace
from tomlkit.toml_file import TOMLFile

from .envsim import MAX_GAIT_SPEED, MAX_GAIT_TURN, PhysicalParams, StateLayout
from .errors import ConfigError
from .helpers import did_you_mean
from .pathcmd import PATH_KINDS, PursuitConfig
from .vaepolicy import PolicyConfig

if TYPE_CHECKING:
    from collections.abc import Generator, KeysView, Mapping, Sequence, ValuesView
    from os import PathLike

_logger = getLogger('worldwalk.config')

SCHEMA_PATH = Path(__file__).parent / 'settings_schema.toml'
SEED_VARIABLE = 'WM_POLICY_SEED'

_T = TypeVar('_T')


class SettingsNode:
    """An abstract base class representing a node in a settings tree structure.

    This class is subclassed by :class:`Setting` and :class:`SettingsGroup`.

    :ivar description: A description of the node, usually specified in the settings schema using TOML comments.
    :ivar parent: The parent node, or ``None`` if it is a root node.
    :ivar in_schema: Whether the node is present in the settings schema.
    :param key: The identifier used for this node by the parent node in the settings tree.
    """

    def __init__(
        self,
        key: str,
        *,
        description: str = '',
        parent: SettingsGroup | None = None,
        in_schema: bool = False,
    ):
        self._key = key
        self.description = description
        self.parent = parent
        self.in_schema = in_schema

    def __repr__(self) -> str:
        return f'<{self.__class__.__name__} {self.path_id()}>'

    @property
    def key(self) -> str:
        return self._key

    def path(self) -> tuple[SettingsNode, ...]:
        """Return a series of node references representing the path to this node from the root node."""
        if self.parent is None:
            return (self,)
        return *self.parent.path(), self

    def path_id(self) -> str:
        """Return the dotted path to this node, leaving out the root node's key."""
        return '.'.join(node.key for node in self.path()[1:])

    def root(self) -> SettingsGroup:
        node = self
        while node.parent is not None:
            node = node.parent
        return cast(SettingsGroup, node)


class Setting(SettingsNode, Generic[_T]):
    """A single setting key-value pair, plus its description from the schema.

    The data type of the setting is inferred from the initial value's data type, and it is enforced in subsequent
    writes to the value of this setting. Integers are accepted for float settings.

    :ivar type: The data type held by the setting.
    """

    def __init__(
        self,
        key: str,
        value: _T,
        *,
        description: str = '',
        parent: SettingsGroup | None = None,
        in_schema: bool = False,
    ) -> None:
        super().__init__(key=key, description=description, parent=parent, in_schema=in_schema)
        self._value: _T = value
        self.type: type = type(value)

    @property
    def value(self) -> _T:
        return self._value

    @value.setter
    def value(self, new_value: _T) -> None:
        if isinstance(new_value, int) and not isinstance(new_value, bool) and self.type == float:  # noqa: E721
            new_value = float(new_value)
        if not isinstance(new_value, self.type) or (isinstance(new_value, bool) and self.type != bool):  # noqa: E721
            raise ConfigError(
                f"cannot assign type '{type(new_value).__name__}' to setting '{self.path_id()}' "
                f"of type '{self.type.__name__}'",
            )
        self._value = new_value


class SettingsGroup(SettingsNode):
    """A collection of :class:`Setting` and child :class:`SettingsGroup` instances, one per TOML table.

    :param key: The identifier used for this node by the parent node in the settings tree.
    :param schema_path: The path to a settings schema to apply to this settings group.
    """

    def __init__(
        self,
        key: str,
        settings: list[Setting] | None = None,
        children: list[SettingsGroup] | None = None,
        *,
        parent: SettingsGroup | None = None,
        in_schema: bool = False,
        schema_path: str | PathLike[str] | None = None,
    ) -> None:
        self._settings: dict[str, Setting] = {setting.key: setting for setting in settings or ()}
        self._children: dict[str, SettingsGroup] = {child.key: child for child in children or ()}
        super().__init__(key=key, parent=parent, in_schema=in_schema)

        if schema_path is not None:
            self.load_schema(file_path=schema_path)

    def __repr__(self) -> str:
        return (
            f'<{self.__class__.__name__} {self.path_id() or self.key} '
            f'settings:{len(self._settings)} children:{len(self._children)}>'
        )

    def __getattr__(self, item: str) -> Setting | SettingsGroup:
        if item.startswith('_'):
            raise AttributeError(item)
        if item in self._children:
            return self._children[item]
        try:
            return self._settings[item]
        except KeyError:
            raise AttributeError(item) from None

    def __contains__(self, item: str) -> bool:
        return item in self._settings

    def __iter__(self) -> Generator[Setting, None, None]:
        yield from self._settings.values()

    def keys(self) -> KeysView[str]:
        return self._settings.keys()

    def child_keys(self) -> KeysView[str]:
        return self._children.keys()

    def children(self) -> ValuesView[SettingsGroup]:
        return self._children.values()

    def walk(self, *, skip_groups: bool = False, skip_settings: bool = False) -> list[SettingsNode]:
        """Recursively traverses all child nodes and returns them as a flat list."""
        discovered: list[SettingsNode] = [] if skip_groups else [self]
        if not skip_settings:
            discovered.extend(self)
        for child in self.children():
            discovered.extend(child.walk(skip_groups=skip_groups, skip_settings=skip_settings))
        return discovered

    def setting_ids(self) -> list[str]:
        return [node.path_id() for node in self.walk(skip_groups=True)]

    @overload
    def load_schema(self, *, file_path: str | PathLike[str], body: None = None) -> None:
        ...

    @overload
    def load_schema(self, *, file_path: None = None, body: list[tuple[Key | None, Item]]) -> None:
        ...

    def load_schema(
        self,
        *,
        file_path: str | PathLike[str] | None = None,
        body: list[tuple[Key | None, Item]] | None = None,
    ) -> None:
        """Load and deserialise a settings schema, for the settings to follow.

        Comments directly above a key or table become its description.

        :param file_path: Path to the schema file.
        :param body: The parsed TOML body data to interpret as. Overrides loading from ``file_path`` when present.
        """
        if body is None and file_path is not None:
            parsed_body = TOMLFile(file_path).read().body
        elif body is not None:
            parsed_body = body
        else:
            raise ValueError('either file_path or body must be specified')

        parsed_body.append((None, Whitespace('')))

        chunk = []
        for item in parsed_body:
            chunk.append(item)
            if item[0] is None:
                continue

            setting = parse_schema_chunk(chunk)
            if setting.type == dict:  # noqa: E721
                group = self.get_child(setting.key, allow_new=True)
                group.description = setting.description
                group.in_schema = True
                table_document = tomlkit.loads(chunk[-1][1].as_string())
                group.load_schema(body=table_document.body)
            else:
                setting.parent = self
                self._settings[setting.key] = setting

            next_chunk: list[tuple[Key | None, Item]] = []
            # comments after a table are parsed as part of that table
            if isinstance(chunk[-1][1], tomlkit.items.Table):
                for line in reversed(chunk[-1][1].as_string().splitlines()):
                    if line.startswith('#'):
                        next_chunk.append((None, tomlkit.comment(line.lstrip('# '))))
                    elif line.strip():
                        break
                next_chunk.reverse()
            chunk = next_chunk

    def get(self, key: str, default: _T = None) -> Setting | _T:
        return self._settings.get(key, default)

    def _unknown(self, key: str) -> ConfigError:
        path = f'{self.path_id()}.{key}' if self.path_id() else key
        candidates = self.root().setting_ids() + [node.path_id() for node in self.root().walk(skip_settings=True)]
        return ConfigError(f"unknown setting '{path}'{did_you_mean(path, filter(None, candidates))}")

    def set(self, key: str, value: Any, *, strict: bool = True) -> None:
        """Set the value for a setting by its key, creating new settings as necessary if not using strict mode.

        :raises ConfigError: In strict mode, when the key is not declared in the schema.
        """
        if key not in self or not self._settings[key].in_schema:
            if strict:
                raise self._unknown(key)
            self._settings[key] = Setting(key, value, parent=self, in_schema=False)
            return
        self._settings[key].value = value

    def set_path(self, dotted_key: str, value: Any) -> None:
        """Set a setting by its dotted path, such as ``env.mass``."""
        *groups, key = dotted_key.split('.')
        node = self
        for group in groups:
            if group not in node.child_keys():
                raise node._unknown(group)
            node = node.get_child(group)
        node.set(key, value)

    def get_child(self, key: str, allow_new: bool = False) -> SettingsGroup:
        if allow_new and key not in self._children:
            self.add_child(SettingsGroup(key))
        return self._children[key]

    def add_child(self, child: SettingsGroup) -> None:
        self._children[child.key] = child
        child.parent = self

    def update_from_dict(self, data: Mapping[str, Any], *, strict: bool = True) -> None:
        """Recursively sets settings from a provided mapping.

        :param strict: Whether unknown keys and tables raise :class:`ConfigError` instead of creating new nodes.
        """
        for key, value in data.items():
            if isinstance(value, dict):
                if strict and key not in self._children:
                    raise self._unknown(key)
                self.get_child(key, allow_new=True).update_from_dict(value, strict=strict)
            else:
                self.set(key, value, strict=strict)

    def as_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {setting.key: setting.value for setting in self}
        for child in self.children():
            data[child.key] = child.as_dict()
        return data

    @overload
    def as_toml(self, *, table: Literal[False] = False) -> TOMLDocument:
        ...

    @overload
    def as_toml(self, *, table: Literal[True]) -> Table:
        ...

    def as_toml(self, *, table: bool = False) -> TOMLDocument | Table:
        """Export the settings as a :class:`TOMLDocument`, with descriptions written back as comments."""
        document = tomlkit.table() if table else TOMLDocument()

        first = True
        for setting in self:
            if not first and setting.description:
                document.add(tomlkit.nl())
            first = False
            for line in setting.description.splitlines():
                document.add(tomlkit.comment(line))
            document.add(setting.key, setting.value)

        for child in self.children():
            document.add(tomlkit.ws('\n\n'))
            toml_table = child.as_toml(table=True)
            for line in child.description.splitlines():
                document.add(tomlkit.comment(line))
            document.append(child.key, toml_table)
            toml_table.trivia.indent = ''

        return document


def parse_schema_chunk(chunk: list[tuple[Key | None, Item]]) -> Setting:
    """Convert a TOMLDocument.body chunk representing a single schema setting into a :class:`Setting` instance.

    Any comments located before the key-value pair will be used for the setting's description.

    :param chunk: A sub-list of TOMLDocument.body. Must contain one key-value pair.
    """
    chunk = chunk.copy()

    description = ''
    while chunk[0][0] is None:
        if isinstance(chunk[0][1], Comment):
            description += chunk[0][1].indent(0).as_string().lstrip('# ')
        chunk.pop(0)

    return Setting(chunk[0][0].key, chunk[0][1].unwrap(), description=description.rstrip(), in_schema=True)


def load_toml(file_path: str | PathLike[str]) -> dict[str, Any]:
    return TOMLFile(file_path).read().unwrap()


def load_config_file(path: Path) -> dict[str, Any]:
    """Read a user config file, TOML or JSON by extension.

    :raises ConfigError: If the file is missing, has another extension, or does not parse.
    """
    if not path.is_file():
        raise ConfigError(f'config file not found: {path.as_posix()}')
    try:
        match path.suffix.lower():
            case '.toml':
                data = load_toml(path)
            case '.json':
                data = json.loads(path.read_text(encoding='utf-8'))
            case _:
                raise ConfigError(f'config file must be .toml or .json: {path.as_posix()}')
    except (ParseError, json.JSONDecodeError) as error:
        raise ConfigError(f'cannot parse {path.as_posix()}: {error}') from error
    if not isinstance(data, dict):
        raise ConfigError(f'config file must hold a table at the top level: {path.as_posix()}')
    return data


def parse_override(override: str) -> tuple[str, Any]:
    """Split ``key=value``; the value is read as a TOML literal, or kept as a plain string if it is not one."""
    key, separator, raw = override.partition('=')
    if not separator or not key.strip():
        raise ConfigError(f"override must look like 'key=value', got {override!r}")
    try:
        value = tomlkit.value(raw.strip()).unwrap()
    except (ParseError, ValueError):
        value = raw.strip()
    return key.strip(), value


def load_settings(
    config_path: Path | None = None,
    overrides: Sequence[str] = (),
    environ: Mapping[str, str] | None = None,
) -> SettingsGroup:
    """Build the settings tree: schema defaults, then the config file, then overrides, then the seed variable."""
    settings = SettingsGroup('settings', schema_path=SCHEMA_PATH)
    if config_path is not None:
        settings.update_from_dict(load_config_file(config_path))
    for override in overrides:
        settings.set_path(*parse_override(override))

    environ = os.environ if environ is None else environ
    if (seed := environ.get(SEED_VARIABLE)) is not None:
        try:
            settings.set('seed', int(seed))
        except ValueError:
            raise ConfigError(f'{SEED_VARIABLE} must be an integer, got {seed!r}') from None
        _logger.info(f'Seed {seed} taken from {SEED_VARIABLE}')
    return settings


def save_settings(settings: SettingsGroup, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(settings.as_toml().as_string(), encoding='utf-8')
    return path


class _Section(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)


class EnvSection(_Section):
    mass: float
    kp: float
    control_latency: float
    max_torque: float
    joints: int
    substeps: pydantic.PositiveInt

    @pydantic.model_validator(mode='after')
    def check_physics(self) -> EnvSection:
        self.physical_params()
        StateLayout(self.joints)
        return self

    def physical_params(self) -> PhysicalParams:
        return PhysicalParams(
            mass=self.mass, kp=self.kp, control_latency=self.control_latency, max_torque=self.max_torque,
        )

    @property
    def layout(self) -> StateLayout:
        return StateLayout(self.joints)


class NetsSection(_Section):
    world_hidden: list[pydantic.PositiveInt]
    policy_hidden: list[pydantic.PositiveInt]
    latent_dim: pydantic.PositiveInt
    sigma: pydantic.PositiveFloat
    window: pydantic.PositiveInt


class TrainSection(_Section):
    """Loop sizes and rates: iterations N, samples per agent n_sample, updates n_w and n_pi, batch M, rollout n."""

    iterations: pydantic.NonNegativeInt
    samples: pydantic.PositiveInt
    agents: pydantic.PositiveInt
    episode_length: pydantic.PositiveInt
    world_updates: pydantic.NonNegativeInt
    policy_updates: pydantic.NonNegativeInt
    batch_size: pydantic.PositiveInt
    rollout: pydantic.PositiveInt
    world_lr: pydantic.PositiveFloat
    policy_lr: pydantic.PositiveFloat
    kl_weight: pydantic.NonNegativeFloat
    reg_weight: pydantic.NonNegativeFloat
    buffer_capacity: pydantic.PositiveInt
    hold_min: pydantic.PositiveFloat
    hold_max: pydantic.PositiveFloat
    bootstrap_noise: pydantic.NonNegativeFloat
    start_noise: pydantic.NonNegativeFloat
    commands: Literal['random', 'path']
    eval_duration: pydantic.PositiveFloat
    clip_speeds: list[float]
    clip_turns: list[float]
    clip_duration: pydantic.PositiveFloat

    @pydantic.model_validator(mode='after')
    def check_ranges(self) -> TrainSection:
        if self.hold_min > self.hold_max:
            raise ValueError('hold_min must not exceed hold_max')
        if not self.clip_speeds or not self.clip_turns:
            raise ValueError('clip_speeds and clip_turns must not be empty')
        if any(not 0 <= speed <= MAX_GAIT_SPEED for speed in self.clip_speeds):
            raise ValueError(f'clip speeds must lie in [0, {MAX_GAIT_SPEED}]')
        if any(abs(turn) > MAX_GAIT_TURN for turn in self.clip_turns):
            raise ValueError(f'clip turns must lie in [-{MAX_GAIT_TURN}, {MAX_GAIT_TURN}]')
        return self


class PathSection(_Section):
    kind: str
    scale: pydantic.PositiveFloat
    speed: float
    lookahead: float
    omega_limit: float

    @pydantic.field_validator('kind')
    @classmethod
    def check_kind(cls, value: str) -> str:
        if value not in PATH_KINDS:
            raise ValueError(f'unknown path kind {value!r}{did_you_mean(value, PATH_KINDS)}')
        return value

    @pydantic.model_validator(mode='after')
    def check_pursuit(self) -> PathSection:
        self.pursuit()
        return self

    def pursuit(self) -> PursuitConfig:
        return PursuitConfig(lookahead=self.lookahead, speed=self.speed, omega_limit=self.omega_limit)


class RunConfig(_Section):
    """The validated, fully materialized configuration of one run."""

    seed: int
    output_dir: str
    debug: bool
    env: EnvSection
    nets: NetsSection
    train: TrainSection
    path: PathSection

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            hidden=tuple(self.nets.policy_hidden),
            latent_dim=self.nets.latent_dim,
            sigma=self.nets.sigma,
            window=self.nets.window,
            kl_weight=self.train.kl_weight,
            reg_weight=self.train.reg_weight,
        )

    @classmethod
    def from_settings(cls, settings: SettingsGroup) -> RunConfig:
        """Validate a settings tree.

        :raises ConfigError: Describing the first invalid value.
        """
        try:
            return cls.model_validate(settings.as_dict())
        except pydantic.ValidationError as error:
            first = error.errors()[0]
            location = '.'.join(str(part) for part in first['loc'])
            detail = first['msg'].removeprefix('Value error, ')
            raise ConfigError(f'{location}: {detail}' if location else detail) from error


def save_run_config(config: RunConfig, path: Path) -> Path:
    """Write the validated configuration as a JSON document, itself a valid ``--config`` file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2) + '\n', encoding='utf-8')
    return path


def load_run_config(
    config_path: Path | None = None,
    overrides: Sequence[str] = (),
    environ: Mapping[str, str] | None = None,
) -> tuple[RunConfig, SettingsGroup]:
    settings = load_settings(config_path, overrides, environ)
    return RunConfig.from_settings(settings), settings
