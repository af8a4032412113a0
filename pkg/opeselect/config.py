"""Pipeline configuration: TOML loading, defaults, rendering and run-directory provenance.

Every setting has an embedded default, so an empty file (or no file) is a complete config. A
config file may carry these tables and keys::

    seeds = [0, 1, 2]
    output_dir = "runs"

    [env]          # LanderConfig fields
    [ddqn]         # DdqnConfig fields
    [cql]          # CqlConfig fields
    [fqe]          # FqeConfig fields
    [selection]    # SelectionConfig fields

    [[state_space]]
    name = "S_less"
    features = ["vx", "vy", "theta", "omega", "contact_left", "contact_right"]
    noise_dims = 0

    [[reward]]
    name = "f_r2"
    include_state_based = false

Listing any ``[[state_space]]`` or ``[[reward]]`` replaces the default candidates. Unknown keys
are errors.
"""
from dataclasses import asdict, dataclass, field, fields, replace
import hashlib
import json
import logging
import os
import tomllib
from typing import Any, Dict, List, Optional, Tuple, get_args, get_origin, get_type_hints

from opeselect.env import (DEFAULT_LANDER, DEFAULT_REWARDS, DEFAULT_STATE_SPACES, UNION_FEATURES,
                           LanderConfig, RewardSpec, StateSpaceSpec)
from opeselect.offline_cql import CqlConfig
from opeselect.online_collect import DdqnConfig
from opeselect.ope import ESTIMATORS, FqeConfig
from opeselect.seeding import stable_hash


SEED_ENV_VAR = 'ORL_SEED'
MANIFEST_NAME = 'manifest.json'


class ConfigError(ValueError):
    """Raised on a missing or malformed config, or an unknown or duplicated candidate name."""


@dataclass(frozen=True)
class SelectionConfig:
    """Settings shared by the selection and evaluation commands.

    Parameters:
        primary_reward: Reward used for collection, state-space selection and evaluation.
        estimators: Estimators run by ``evaluate`` when none are named.
        bins, value_range, smoothing: Histogram settings of the divergence estimates.
        fractions: Dataset fractions of the worst, average and best offline policies trained by
            ``train-offline --ladder``.
        audit_episodes: Default rollout count of live audits.
        jobs: Worker processes for per-candidate jobs.
    """
    primary_reward: str = 'f'
    estimators: Tuple[str, ...] = ESTIMATORS
    bins: int = 50
    value_range: Tuple[float, float] = (-5.0, 5.0)
    smoothing: float = 1e-8
    fractions: Tuple[float, float, float] = (0.05, 0.3, 1.0)
    audit_episodes: int = 100
    jobs: int = 1

    def __post_init__(self):
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f'SelectionConfig: unknown estimators {unknown}')
        if len(self.value_range) != 2 or not self.value_range[0] < self.value_range[1]:
            raise ValueError(f'SelectionConfig: bad value_range {self.value_range}')
        if self.bins < 1 or self.smoothing < 0.0 or self.jobs < 1 or self.audit_episodes < 0:
            raise ValueError('SelectionConfig: bins and jobs must be positive, smoothing and '
                             'audit_episodes non-negative')
        if len(self.fractions) != 3 or not all(0.0 < f <= 1.0 for f in self.fractions):
            raise ValueError(f'SelectionConfig: fractions must be three values in (0, 1], got '
                             f'{self.fractions}')


SECTIONS = {'env': LanderConfig,
            'ddqn': DdqnConfig,
            'cql': CqlConfig,
            'fqe': FqeConfig,
            'selection': SelectionConfig}


@dataclass(frozen=True)
class PipelineConfig:
    """The whole experiment: module configs, candidates, seeds and output root."""
    env: LanderConfig = DEFAULT_LANDER
    ddqn: DdqnConfig = field(default_factory=DdqnConfig)
    cql: CqlConfig = field(default_factory=CqlConfig)
    fqe: FqeConfig = field(default_factory=FqeConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    state_spaces: Tuple[StateSpaceSpec, ...] = DEFAULT_STATE_SPACES
    rewards: Tuple[RewardSpec, ...] = DEFAULT_REWARDS
    seeds: Tuple[int, ...] = (0, 1, 2)
    output_dir: str = 'runs'

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError('PipelineConfig: seeds must not be empty')
        if any(s < 0 for s in self.seeds):
            raise ConfigError(f'PipelineConfig: seeds must be non-negative, got {self.seeds}')
        for kind, names in (('state space', [s.name for s in self.state_spaces]),
                            ('reward', [r.name for r in self.rewards])):
            if not names:
                raise ConfigError(f'PipelineConfig: no {kind} candidates')
            duplicates = sorted({n for n in names if names.count(n) > 1})
            if duplicates:
                raise ConfigError(f'PipelineConfig: duplicate {kind} names {duplicates}')
        reward_names = [r.name for r in self.rewards]
        if self.selection.primary_reward not in reward_names:
            raise ConfigError(f'PipelineConfig: primary_reward '
                              f'{self.selection.primary_reward!r} is not among the rewards '
                              f'{reward_names}')


def _coerce(value: Any, hint: Any, where: str) -> Any:
    """Checks a TOML value against a field annotation and converts lists to tuples."""
    if get_origin(hint) is tuple:
        if not isinstance(value, list):
            raise ConfigError(f'load_config: {where}: expected an array, got {value!r}')
        elem = get_args(hint)[0]
        return tuple(_coerce(v, elem, where) for v in value)
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, int | float) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f'load_config: {where}: expected {getattr(hint, "__name__", hint)}, '
                          f'got {value!r}')
    return value


def _build(cls, table: Dict[str, Any], where: str, base: Any = None) -> Any:
    """Instantiates a config dataclass from a TOML table, over ``base`` or the defaults."""
    if not isinstance(table, dict):
        raise ConfigError(f'load_config: [{where}] must be a table')
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f'load_config: [{where}]: unknown keys {unknown}')
    kwargs = {k: _coerce(v, hints[k], f'{where}.{k}') for k, v in table.items()}
    try:
        return replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f'load_config: [{where}]: {exc}') from exc


def _state_space(table: Dict[str, Any], where: str) -> StateSpaceSpec:
    unknown = sorted(set(table) - {'name', 'features', 'noise_dims'})
    if unknown:
        raise ConfigError(f'load_config: {where}: unknown keys {unknown}')
    if 'name' not in table or 'features' not in table:
        raise ConfigError(f'load_config: {where}: name and features are required')
    name = _coerce(table['name'], str, f'{where}.name')
    features = _coerce(table['features'], Tuple[str, ...], f'{where}.features')
    noise_dims = _coerce(table.get('noise_dims', 0), int, f'{where}.noise_dims')
    try:
        return StateSpaceSpec.from_features(name, features, UNION_FEATURES, noise_dims)
    except ValueError as exc:
        raise ConfigError(f'load_config: {where}: {exc}') from exc


def config_from_dict(data: Dict[str, Any]) -> PipelineConfig:
    """Builds a PipelineConfig from parsed TOML, filling every missing key with its default.

    Raises:
        ConfigError: on unknown keys, wrong value types or invalid values.
    """
    allowed = set(SECTIONS) | {'state_space', 'reward', 'seeds', 'output_dir'}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f'load_config: unknown top-level keys {unknown}')
    defaults = PipelineConfig()
    kwargs = {name: _build(cls, data[name], name, getattr(defaults, name))
              for name, cls in SECTIONS.items() if name in data}
    if 'state_space' in data:
        kwargs['state_spaces'] = tuple(_state_space(t, f'[[state_space]] #{i + 1}')
                                       for i, t in enumerate(data['state_space']))
    if 'reward' in data:
        rewards = []
        for i, t in enumerate(data['reward']):
            if 'name' not in t:
                raise ConfigError(f'load_config: [[reward]] #{i + 1}: name is required')
            rewards.append(_build(RewardSpec, t, f'[[reward]] #{i + 1}'))
        kwargs['rewards'] = tuple(rewards)
    if 'seeds' in data:
        kwargs['seeds'] = _coerce(data['seeds'], Tuple[int, ...], 'seeds')
    if 'output_dir' in data:
        kwargs['output_dir'] = _coerce(data['output_dir'], str, 'output_dir')
    return PipelineConfig(**kwargs)


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """Reads a TOML config file; ``None`` gives the defaults.

    Raises:
        ConfigError: if the file is missing or not valid TOML, or on any config error.
    """
    if path is None:
        return PipelineConfig()
    try:
        with open(path, 'rb') as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f'load_config: {path}: no such config file') from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f'load_config: {path}: invalid TOML: {exc}') from exc
    cfg = config_from_dict(data)
    logging.debug('load_config: %s -> hash %s', path, config_hash(cfg))
    return cfg


def config_to_dict(cfg: PipelineConfig) -> Dict[str, Any]:
    """The effective config as plain data in the TOML layout."""
    data: Dict[str, Any] = {'seeds': list(cfg.seeds), 'output_dir': cfg.output_dir}
    for name in SECTIONS:
        data[name] = asdict(getattr(cfg, name))
    data['state_space'] = [{'name': s.name,
                            'features': [UNION_FEATURES[i] for i in s.indices],
                            'noise_dims': s.noise_dims} for s in cfg.state_spaces]
    data['reward'] = [asdict(r) for r in cfg.rewards]
    return data


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return '[' + ', '.join(_toml_value(v) for v in value) + ']'
    return json.dumps(str(value))


def render_config(cfg: PipelineConfig) -> str:
    """Renders the effective config as TOML that load_config() reads back to an equal config."""
    data = config_to_dict(cfg)
    lines = [f'seeds = {_toml_value(data["seeds"])}',
             f'output_dir = {_toml_value(data["output_dir"])}']
    for name in SECTIONS:
        lines.extend(['', f'[{name}]'])
        lines.extend(f'{k} = {_toml_value(v)}' for k, v in data[name].items())
    for array_name in ('state_space', 'reward'):
        for item in data[array_name]:
            lines.extend(['', f'[[{array_name}]]'])
            lines.extend(f'{k} = {_toml_value(v)}' for k, v in item.items())
    return '\n'.join(lines) + '\n'


def config_hash(cfg: PipelineConfig) -> str:
    """12-hex-digit digest of everything but the seeds and the output root."""
    data = config_to_dict(cfg)
    del data['seeds'], data['output_dir']
    return stable_hash(data)


def resolve_seeds(cfg: PipelineConfig, override: Optional[int] = None) -> Tuple[int, ...]:
    """Seeds to run: ``override``, else ``ORL_SEED`` from the environment, else the config's.

    Raises:
        ConfigError: if ORL_SEED is set but not a non-negative integer.
    """
    if override is not None:
        return (override,)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None and env_seed.strip() != '':
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f'resolve_seeds: {SEED_ENV_VAR}={env_seed!r} is not an integer') \
                from exc
        if seed < 0:
            raise ConfigError(f'resolve_seeds: {SEED_ENV_VAR} must be non-negative')
        return (seed,)
    return cfg.seeds


def find_state_space(cfg: PipelineConfig, name: str) -> StateSpaceSpec:
    """Looks up a candidate state space by name.

    Raises:
        ConfigError: naming the unknown candidate and the known ones.
    """
    for spec in cfg.state_spaces:
        if spec.name == name:
            return spec
    raise ConfigError(f'find_state_space: unknown state space {name!r}, known: '
                      f'{[s.name for s in cfg.state_spaces]}')


def find_reward(cfg: PipelineConfig, name: str) -> RewardSpec:
    """Looks up a candidate reward by name.

    Raises:
        ConfigError: naming the unknown candidate and the known ones.
    """
    for spec in cfg.rewards:
        if spec.name == name:
            return spec
    raise ConfigError(f'find_reward: unknown reward {name!r}, known: '
                      f'{[r.name for r in cfg.rewards]}')


def run_directory(cfg: PipelineConfig, seed: int) -> str:
    """Creates and returns ``<output_dir>/<config-hash>/<seed>``."""
    path = os.path.join(cfg.output_dir, config_hash(cfg), str(seed))
    os.makedirs(path, exist_ok=True)
    return path


def file_digest(path: str) -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(directory: str, cfg: PipelineConfig, seed: int) -> str:
    """Writes ``manifest.json`` listing every file under ``directory`` with its SHA-256.

    Returns:
        The manifest path.
    """
    entries: List[Dict[str, str]] = []
    for root, dirs, files in os.walk(directory):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, directory).replace(os.sep, '/')
            if rel == MANIFEST_NAME:
                continue
            entries.append({'path': rel, 'sha256': file_digest(path)})
    entries.sort(key=lambda e: e['path'])
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    with open(manifest_path, 'w', encoding='UTF-8', newline='\n') as fh:
        json.dump({'config_hash': config_hash(cfg), 'seed': seed, 'files': entries}, fh,
                  indent=2)
        fh.write('\n')
    return manifest_path
