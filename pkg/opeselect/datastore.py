"""The logged-interaction dataset format.

A dataset file is line-delimited JSON: the first line is the header, every following line is one
transition. Files ending in ``.gz`` are gzip-compressed (written with a zero mtime so identical
datasets give identical bytes). Floats are written with Python's shortest round-trip repr, so
reading a written dataset reproduces every value exactly.

.. code-block:: text

    {"format_version": 1, "feature_names": ["x", ...], "action_count": 4, ...}
    {"episode_id": 0, "t": 0, "s_union": [...], "action": 2, "reward_components":
        {"state_based": ..., "action_based": ..., "terminal": ...}, "s_next_union": [...],
        "done": false, "truncated": false, "propensity": 0.925}

Every reward component is stored per transition so that reward candidates can be evaluated
offline, and the behavior propensity of the logged action is stored so that importance weights are
exact.
"""
from dataclasses import dataclass, field
from functools import cached_property
import gzip
import io
import json
import logging
import math
from typing import Dict, Iterator, List, Sequence, Tuple, TextIO

import numpy as np

from opeselect.env import RewardComponents, COMPONENT_NAMES


FORMAT_VERSION = 1
DATASET_SUFFIX = '.orl.jsonl'
COMPRESSED_SUFFIX = '.orl.jsonl.gz'
_HEADER_KEYS = ('format_version', 'feature_names', 'action_count', 'env_config_hash',
                'collection_seed', 'episode_count', 'transition_count')
_TRANSITION_KEYS = ('episode_id', 't', 's_union', 'action', 'reward_components', 's_next_union',
                    'done', 'truncated', 'propensity')


class DatasetError(ValueError):
    """Raised on unreadable dataset files and on dataset invariant violations."""


@dataclass(frozen=True)
class Transition:
    """One logged environment step.

    Parameters:
        episode_id: Episode the step belongs to.
        t: Step index within the episode, starting at 0.
        s_union: Union feature vector before the step.
        action: Logged action id.
        reward_components: All reward components of the step.
        s_next_union: Union feature vector after the step.
        done: True on the last step of the episode.
        truncated: True when the episode ended by exhausting the step budget (implies done).
        propensity: Behavior probability of the logged action, in (0, 1].
    """
    episode_id: int
    t: int
    s_union: Tuple[float, ...]
    action: int
    reward_components: RewardComponents
    s_next_union: Tuple[float, ...]
    done: bool
    truncated: bool
    propensity: float

    @property
    def true_terminal(self) -> bool:
        """True when the episode ended in a real terminal state rather than by truncation."""
        return self.done and not self.truncated


@dataclass(frozen=True)
class EpisodeLog:
    """The ordered transitions of one episode."""
    episode_id: int
    transitions: Tuple[Transition, ...]

    def __len__(self):
        return len(self.transitions)


@dataclass(frozen=True)
class DatasetHeader:
    """Dataset-level metadata, written as the first line of the file."""
    feature_names: Tuple[str, ...]
    action_count: int
    env_config_hash: str = ''
    collection_seed: int = 0
    episode_count: int = 0
    transition_count: int = 0
    format_version: int = FORMAT_VERSION

    @property
    def union_dim(self) -> int:
        return len(self.feature_names)


@dataclass(frozen=True)
class TransitionArrays:
    """Column-major numpy view of a dataset, built once per Dataset.

    ``episode_index`` maps each row to the position of its episode in ``Dataset.episodes``;
    ``episode_starts`` holds the row of each episode's first step.
    """
    states: np.ndarray
    actions: np.ndarray
    components: np.ndarray
    next_states: np.ndarray
    done: np.ndarray
    truncated: np.ndarray
    propensities: np.ndarray
    episode_index: np.ndarray
    t: np.ndarray
    episode_starts: np.ndarray
    episode_lengths: np.ndarray

    @property
    def true_terminal(self) -> np.ndarray:
        return self.done & ~self.truncated

    @property
    def initial_states(self) -> np.ndarray:
        return self.states[self.episode_starts]


@dataclass(frozen=True)
class DatasetDiagnostics:
    """Result of validate_dataset().

    Parameters:
        violations: One message per detected invariant violation; empty for a valid dataset.
        episode_count, transition_count: Counts found in the body.
        min_propensity: Smallest logged propensity, or NaN for an empty dataset.
        component_returns: Per reward component, mean / std / min / max of undiscounted episode
            sums.
    """
    violations: Tuple[str, ...]
    episode_count: int
    transition_count: int
    min_propensity: float
    component_returns: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0


@dataclass(frozen=True)
class Dataset:
    """A header plus its episodes. Immutable; numpy views are built lazily and cached."""
    header: DatasetHeader
    episodes: Tuple[EpisodeLog, ...]

    @property
    def num_episodes(self) -> int:
        return len(self.episodes)

    @property
    def num_transitions(self) -> int:
        return sum(len(e) for e in self.episodes)

    @cached_property
    def arrays(self) -> TransitionArrays:
        """All transitions as numpy arrays, in file order."""
        transitions = [tr for ep in self.episodes for tr in ep.transitions]
        d = self.header.union_dim
        lengths = np.array([len(ep) for ep in self.episodes], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64) \
            if len(lengths) else np.zeros(0, dtype=np.int64)
        return TransitionArrays(
            states=np.array([tr.s_union for tr in transitions], dtype=np.float64).reshape(-1, d),
            actions=np.array([tr.action for tr in transitions], dtype=np.int64),
            components=np.array([tr.reward_components.as_tuple() for tr in transitions],
                                dtype=np.float64).reshape(-1, len(COMPONENT_NAMES)),
            next_states=np.array([tr.s_next_union for tr in transitions],
                                 dtype=np.float64).reshape(-1, d),
            done=np.array([tr.done for tr in transitions], dtype=bool),
            truncated=np.array([tr.truncated for tr in transitions], dtype=bool),
            propensities=np.array([tr.propensity for tr in transitions], dtype=np.float64),
            episode_index=np.repeat(np.arange(len(self.episodes)), lengths),
            t=np.array([tr.t for tr in transitions], dtype=np.int64),
            episode_starts=starts,
            episode_lengths=lengths)

    def head(self, fraction: float) -> 'Dataset':
        """Returns a dataset made of the first ``ceil(fraction * episodes)`` episodes.

        Raises:
            ValueError: if fraction is not in (0, 1].
        """
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f'Dataset.head: fraction must be in (0, 1], got {fraction}')
        keep = max(1, math.ceil(fraction * len(self.episodes))) if self.episodes else 0
        episodes = self.episodes[:keep]
        header = make_header(self.header.feature_names, self.header.action_count, episodes,
                             self.header.env_config_hash, self.header.collection_seed)
        return Dataset(header, episodes)


def make_header(feature_names: Sequence[str],
                action_count: int,
                episodes: Sequence[EpisodeLog],
                env_config_hash: str = '',
                collection_seed: int = 0) -> DatasetHeader:
    """Builds a header whose counts match ``episodes``."""
    return DatasetHeader(tuple(feature_names), int(action_count), env_config_hash,
                         int(collection_seed), len(episodes), sum(len(e) for e in episodes))


def _transition_problems(tr: Transition, header: DatasetHeader) -> List[str]:
    """Lists the single-transition invariant violations of ``tr``."""
    problems = []
    if not (isinstance(tr.propensity, float | int) and 0.0 < tr.propensity <= 1.0):
        problems.append(f'propensity {tr.propensity} not in (0, 1]')
    if tr.truncated and not tr.done:
        problems.append('truncated without done')
    for name, vec in (('s_union', tr.s_union), ('s_next_union', tr.s_next_union)):
        if len(vec) != header.union_dim:
            problems.append(f'{name} has length {len(vec)}, union dimension is '
                            f'{header.union_dim}')
        elif not all(math.isfinite(v) for v in vec):
            problems.append(f'{name} has a non-finite value')
    if not 0 <= tr.action < header.action_count:
        problems.append(f'action {tr.action} outside [0, {header.action_count})')
    if not all(math.isfinite(v) for v in tr.reward_components.as_tuple()):
        problems.append('non-finite reward component')
    if not tr.done and tr.reward_components.terminal != 0.0:
        problems.append('terminal reward component on a non-final step')
    return problems


def validate_dataset(header: DatasetHeader,
                     episodes: Sequence[EpisodeLog]) -> DatasetDiagnostics:
    """Checks every header, transition and episode invariant.

    Beyond the per-transition rules (propensity in (0, 1], truncated implies done, vector widths,
    finite values), every episode must be non-empty, number its steps 0, 1, 2, ... and carry
    ``done`` on its last step and only there. Violations are collected, not raised.

    Args:
        header: Dataset header.
        episodes: Episodes in file order.

    Returns:
        DatasetDiagnostics with the violations and summary statistics.
    """
    violations = []
    if len(header.feature_names) == 0:
        violations.append('header: empty feature_names')
    if header.episode_count != len(episodes):
        violations.append(f'header: episode_count {header.episode_count} != {len(episodes)} '
                          'episodes in body')
    n_transitions = sum(len(e) for e in episodes)
    if header.transition_count != n_transitions:
        violations.append(f'header: transition_count {header.transition_count} != '
                          f'{n_transitions} transitions in body')
    seen_ids = set()
    min_prop = math.inf
    sums = {name: [] for name in COMPONENT_NAMES}
    for ep in episodes:
        if ep.episode_id in seen_ids:
            violations.append(f'episode {ep.episode_id}: duplicate episode id')
        seen_ids.add(ep.episode_id)
        if len(ep.transitions) == 0:
            violations.append(f'episode {ep.episode_id}: no transitions')
            continue
        totals = [0.0] * len(COMPONENT_NAMES)
        for i, tr in enumerate(ep.transitions):
            where = f'episode {ep.episode_id} step {tr.t}'
            if tr.episode_id != ep.episode_id:
                violations.append(f'{where}: transition carries episode id {tr.episode_id}')
            if tr.t != i:
                violations.append(f'{where}: step index {tr.t}, expected {i}')
            if tr.done and i != len(ep.transitions) - 1:
                violations.append(f'{where}: done before the last step')
            violations.extend(f'{where}: {p}' for p in _transition_problems(tr, header))
            if isinstance(tr.propensity, float | int):
                min_prop = min(min_prop, tr.propensity)
            for k, v in enumerate(tr.reward_components.as_tuple()):
                totals[k] += v
        if not ep.transitions[-1].done:
            violations.append(f'episode {ep.episode_id}: last step is not marked done')
        for name, total in zip(COMPONENT_NAMES, totals):
            sums[name].append(total)
    stats = {}
    for name, values in sums.items():
        if values:
            arr = np.array(values)
            stats[name] = {'mean': float(arr.mean()), 'std': float(arr.std()),
                           'min': float(arr.min()), 'max': float(arr.max())}
    if violations:
        logging.debug('validate_dataset: %s violations, first: %s', len(violations),
                      violations[0])
    return DatasetDiagnostics(tuple(violations), len(episodes), n_transitions,
                              min_prop if math.isfinite(min_prop) else math.nan, stats)


def _open_text(path: str, mode: str) -> TextIO:
    """Opens ``path`` as UTF-8 text, through gzip when it ends in '.gz'."""
    if str(path).endswith('.gz'):
        return io.TextIOWrapper(gzip.GzipFile(path, mode + 'b', mtime=0), encoding='UTF-8',
                                newline='\n')
    return open(path, mode, encoding='UTF-8', newline='\n')


def _header_to_json(header: DatasetHeader) -> str:
    return json.dumps({'format_version': header.format_version,
                       'feature_names': list(header.feature_names),
                       'action_count': header.action_count,
                       'env_config_hash': header.env_config_hash,
                       'collection_seed': header.collection_seed,
                       'episode_count': header.episode_count,
                       'transition_count': header.transition_count})


def _transition_to_json(tr: Transition) -> str:
    rc = tr.reward_components
    return json.dumps({'episode_id': tr.episode_id,
                       't': tr.t,
                       's_union': [float(v) for v in tr.s_union],
                       'action': tr.action,
                       'reward_components': {'state_based': float(rc.state_based),
                                             'action_based': float(rc.action_based),
                                             'terminal': float(rc.terminal)},
                       's_next_union': [float(v) for v in tr.s_next_union],
                       'done': tr.done,
                       'truncated': tr.truncated,
                       'propensity': float(tr.propensity)})


def write_dataset(path: str, header: DatasetHeader, episodes: Sequence[EpisodeLog]) -> None:
    """Writes a dataset file.

    Args:
        path: Destination. A name ending in '.gz' selects the compressed variant.
        header: Header whose counts match ``episodes``.
        episodes: Episodes to write.

    Raises:
        DatasetError: if the dataset violates an invariant (nothing is written).
        OSError: on I/O failure.
    """
    diagnostics = validate_dataset(header, episodes)
    if not diagnostics.ok:
        raise DatasetError(f'write_dataset: {len(diagnostics.violations)} invariant violations, '
                           f'first: {diagnostics.violations[0]}')
    with _open_text(path, 'w') as fh:
        fh.write(_header_to_json(header) + '\n')
        for ep in episodes:
            for tr in ep.transitions:
                fh.write(_transition_to_json(tr) + '\n')
    logging.info('write_dataset: wrote %s episodes / %s transitions to %s',
                 header.episode_count, header.transition_count, path)


def save_dataset(path: str, dataset: Dataset) -> None:
    """Writes a Dataset object; see write_dataset()."""
    write_dataset(path, dataset.header, dataset.episodes)


def _parse_header(line: str) -> DatasetHeader:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f'read_dataset: line 1: malformed header: {exc}') from exc
    if not isinstance(obj, dict):
        raise DatasetError('read_dataset: line 1: header is not an object')
    if obj.get('format_version') != FORMAT_VERSION:
        raise DatasetError(f'read_dataset: line 1: format_version {obj.get("format_version")} '
                           f'is not supported (expected {FORMAT_VERSION})')
    if tuple(obj) != _HEADER_KEYS:
        raise DatasetError(f'read_dataset: line 1: header keys {list(obj)} != '
                           f'{list(_HEADER_KEYS)}')
    return DatasetHeader(tuple(obj['feature_names']), int(obj['action_count']),
                         str(obj['env_config_hash']), int(obj['collection_seed']),
                         int(obj['episode_count']), int(obj['transition_count']),
                         int(obj['format_version']))


def _parse_transition(line: str, line_num: int, header: DatasetHeader) -> Transition:
    try:
        obj = json.loads(line)
        if not isinstance(obj, dict) or tuple(obj) != _TRANSITION_KEYS:
            raise ValueError(f'keys {list(obj) if isinstance(obj, dict) else obj!r} != '
                             f'{list(_TRANSITION_KEYS)}')
        rc = obj['reward_components']
        if tuple(rc) != COMPONENT_NAMES:
            raise ValueError(f'reward component keys {list(rc)} != {list(COMPONENT_NAMES)}')
        if not isinstance(obj['done'], bool) or not isinstance(obj['truncated'], bool):
            raise ValueError('done / truncated must be booleans')
        tr = Transition(int(obj['episode_id']),
                        int(obj['t']),
                        tuple(float(v) for v in obj['s_union']),
                        int(obj['action']),
                        RewardComponents(float(rc['state_based']), float(rc['action_based']),
                                         float(rc['terminal'])),
                        tuple(float(v) for v in obj['s_next_union']),
                        obj['done'],
                        obj['truncated'],
                        float(obj['propensity']))
    except (ValueError, TypeError, KeyError) as exc:
        raise DatasetError(f'read_dataset: line {line_num}: malformed transition: {exc}') \
            from exc
    problems = _transition_problems(tr, header)
    if problems:
        raise DatasetError(f'read_dataset: line {line_num}: episode {tr.episode_id} step '
                           f'{tr.t}: {"; ".join(problems)}')
    return tr


def _iter_lines(fh: TextIO) -> Iterator[Tuple[int, str]]:
    for line_num, line in enumerate(fh, start=1):
        if not line.endswith('\n'):
            raise DatasetError(f'read_dataset: line {line_num}: truncated line (no newline)')
        yield line_num, line


def read_dataset(path: str) -> Dataset:
    """Reads and validates a dataset file.

    Every invariant is re-checked on load. No partial dataset is ever returned: any problem
    raises.

    Args:
        path: Dataset file; '.gz' names are decompressed.

    Returns:
        The Dataset.

    Raises:
        DatasetError: on a version mismatch, a malformed or truncated line (the message names the
            line number) or an invariant violation (the message names episode and step).
        OSError: if the file cannot be opened.
    """
    header = None
    episodes: List[EpisodeLog] = []
    current: List[Transition] = []
    try:
        with _open_text(path, 'r') as fh:
            for line_num, line in _iter_lines(fh):
                if header is None:
                    header = _parse_header(line)
                    continue
                tr = _parse_transition(line, line_num, header)
                if current and tr.episode_id != current[-1].episode_id:
                    episodes.append(EpisodeLog(current[0].episode_id, tuple(current)))
                    current = []
                current.append(tr)
    except (EOFError, gzip.BadGzipFile, UnicodeDecodeError) as exc:
        raise DatasetError(f'read_dataset: {path}: corrupt or truncated file: {exc}') from exc
    if header is None:
        raise DatasetError(f'read_dataset: {path}: empty file, no header')
    if current:
        episodes.append(EpisodeLog(current[0].episode_id, tuple(current)))
    diagnostics = validate_dataset(header, episodes)
    if not diagnostics.ok:
        raise DatasetError(f'read_dataset: {path}: {diagnostics.violations[0]}'
                           + (f' (+{len(diagnostics.violations) - 1} more)'
                              if len(diagnostics.violations) > 1 else ''))
    logging.debug('read_dataset: %s: %s episodes, %s transitions', path, len(episodes),
                  header.transition_count)
    return Dataset(header, tuple(episodes))
