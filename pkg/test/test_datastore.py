"""Test the logged dataset format: writing, reading and invariant checks"""
from dataclasses import replace
import gzip
import json
import logging
import os
import re
import tempfile
from unittest import TestCase

import numpy as np

from opeselect.datastore import (COMPRESSED_SUFFIX, DATASET_SUFFIX, Dataset, DatasetError,
                                 EpisodeLog, Transition, make_header, read_dataset, save_dataset,
                                 validate_dataset, write_dataset)
from opeselect.env import RewardComponents
from opeselect.tabular import collect_tabular_dataset, random_tabular_mdp

logging.basicConfig(level=logging.INFO)


def random_float_dataset(n_episodes=3, length=4, seed=0):
    """Episodes with arbitrary float vectors, the last one truncated"""
    rng = np.random.default_rng(seed)
    episodes = []
    for e in range(n_episodes):
        transitions = []
        for t in range(length):
            last = t == length - 1
            truncated = last and e == n_episodes - 1
            transitions.append(Transition(
                e, t, tuple(rng.normal(size=2).tolist()), int(rng.integers(3)),
                RewardComponents(float(rng.normal()), -float(rng.uniform()),
                                 100.0 if last and not truncated else 0.0),
                tuple(rng.normal(size=2).tolist()), last, truncated,
                float(rng.uniform(0.05, 1.0))))
        episodes.append(EpisodeLog(e, tuple(transitions)))
    header = make_header(('a', 'b'), 3, episodes, 'cafe', seed)
    return Dataset(header, tuple(episodes))


class TestDatastore(TestCase):
    """Test write_dataset(), read_dataset() and validate_dataset()"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def _path(self, name):
        return os.path.join(self.dir, name)

    def test_round_trip_exact(self):
        """Reading a written dataset reproduces every value exactly, plain and gzip"""
        data = random_float_dataset()
        for name in ('d' + DATASET_SUFFIX, 'd' + COMPRESSED_SUFFIX):
            save_dataset(self._path(name), data)
            assert read_dataset(self._path(name)) == data

    def test_file_layout(self):
        """The header comes first, one transition per line, keys in fixed order"""
        data = random_float_dataset(n_episodes=1, length=2)
        path = self._path('d' + DATASET_SUFFIX)
        save_dataset(path, data)
        with open(path, encoding='UTF-8') as fh:
            lines = fh.read().splitlines()
        assert len(lines) == 3
        header = json.loads(lines[0])
        assert list(header)[:3] == ['format_version', 'feature_names', 'action_count']
        assert header['transition_count'] == 2
        assert list(json.loads(lines[1])) == ['episode_id', 't', 's_union', 'action',
                                              'reward_components', 's_next_union', 'done',
                                              'truncated', 'propensity']

    def test_gzip_reproducible(self):
        """Compressed files carry no timestamp, so rewriting gives identical bytes"""
        data = random_float_dataset()
        paths = []
        for sub in ('one', 'two'):
            os.makedirs(self._path(sub))
            paths.append(os.path.join(self._path(sub), 'd' + COMPRESSED_SUFFIX))
            save_dataset(paths[-1], data)
        with open(paths[0], 'rb') as a, open(paths[1], 'rb') as b:
            assert a.read() == b.read()

    def test_zero_propensity_names_line(self):
        """A zero propensity on line 12 is reported with its line number"""
        mdp = random_tabular_mdp(3, 2, 0)
        data = collect_tabular_dataset(mdp, np.full((3, 2), 0.5), 4, horizon=5, seed=0)
        path = self._path('d' + DATASET_SUFFIX)
        save_dataset(path, data)
        with open(path, encoding='UTF-8') as fh:
            lines = fh.readlines()
        lines[11] = re.sub(r'"propensity": [^}]*}', '"propensity": 0.0}', lines[11])
        with open(path, 'w', encoding='UTF-8') as fh:
            fh.writelines(lines)
        with self.assertRaises(DatasetError) as ctx:
            read_dataset(path)
        assert 'line 12' in str(ctx.exception)
        assert 'propensity' in str(ctx.exception)

    def test_truncated_files(self):
        """A cut-off line or a cut-off gzip stream is rejected, never half-read"""
        data = random_float_dataset()
        plain = self._path('d' + DATASET_SUFFIX)
        save_dataset(plain, data)
        with open(plain, encoding='UTF-8') as fh:
            text = fh.read()
        with open(plain, 'w', encoding='UTF-8') as fh:
            fh.write(text[:-20])
        with self.assertRaises(DatasetError) as ctx:
            read_dataset(plain)
        assert 'truncated' in str(ctx.exception)
        packed = self._path('d' + COMPRESSED_SUFFIX)
        save_dataset(packed, data)
        with open(packed, 'rb') as fh:
            blob = fh.read()
        with open(packed, 'wb') as fh:
            fh.write(blob[:len(blob) // 2])
        with self.assertRaises(DatasetError):
            read_dataset(packed)

    def test_missing_done_flag(self):
        """An episode whose last step is not done is an invariant violation"""
        data = random_float_dataset()
        path = self._path('d' + DATASET_SUFFIX)
        save_dataset(path, data)
        with open(path, encoding='UTF-8') as fh:
            lines = fh.readlines()
        # line 5 is the last step of episode 0
        lines[4] = lines[4].replace('"done": true', '"done": false').replace(
            '"terminal": 100.0', '"terminal": 0.0')
        with open(path, 'w', encoding='UTF-8') as fh:
            fh.writelines(lines)
        with self.assertRaises(DatasetError) as ctx:
            read_dataset(path)
        assert 'not marked done' in str(ctx.exception)

    def test_header_errors(self):
        """Empty files, unknown versions and wrong counts are rejected"""
        path = self._path('d' + DATASET_SUFFIX)
        with open(path, 'w', encoding='UTF-8') as fh:
            fh.write('')
        with self.assertRaises(DatasetError):
            read_dataset(path)
        data = random_float_dataset()
        save_dataset(path, data)
        with open(path, encoding='UTF-8') as fh:
            lines = fh.readlines()
        with open(path, 'w', encoding='UTF-8') as fh:
            fh.writelines([lines[0].replace('"format_version": 1', '"format_version": 2')]
                          + lines[1:])
        with self.assertRaises(DatasetError) as ctx:
            read_dataset(path)
        assert 'format_version' in str(ctx.exception)
        with open(path, 'w', encoding='UTF-8') as fh:
            fh.writelines(lines[:-1])
        with self.assertRaises(DatasetError) as ctx:
            read_dataset(path)
        assert 'transition_count' in str(ctx.exception)

    def test_missing_file(self):
        """A missing file is an OSError"""
        with self.assertRaises(OSError):
            read_dataset(self._path('nothing' + DATASET_SUFFIX))

    def test_write_rejects_invalid(self):
        """write_dataset() validates first and writes nothing on a violation"""
        data = random_float_dataset()
        ep = data.episodes[0]
        bad = replace(ep.transitions[1], propensity=0.0)
        episodes = (EpisodeLog(0, (ep.transitions[0], bad) + ep.transitions[2:]),) \
            + data.episodes[1:]
        path = self._path('bad' + DATASET_SUFFIX)
        with self.assertRaises(DatasetError):
            write_dataset(path, data.header, episodes)
        assert not os.path.exists(path)


class TestValidation(TestCase):
    """Test validate_dataset() diagnostics and the Dataset helpers"""

    def test_diagnostics(self):
        """Valid data reports counts, the minimum propensity and component statistics"""
        data = random_float_dataset()
        diag = validate_dataset(data.header, data.episodes)
        assert diag.ok
        assert diag.episode_count == 3 and diag.transition_count == 12
        assert diag.min_propensity == float(np.min(data.arrays.propensities))
        assert diag.component_returns['terminal']['max'] == 100.0
        assert diag.component_returns['terminal']['min'] == 0.0

    def test_violations_collected(self):
        """Step gaps, early done flags and terminal rewards mid-episode are all reported"""
        data = random_float_dataset(n_episodes=1)
        tr = data.episodes[0].transitions
        broken = (tr[0], replace(tr[1], t=5), replace(tr[2], done=True,
                                                      reward_components=RewardComponents(
                                                          0.0, 0.0, 0.0)),
                  replace(tr[3], truncated=False))
        broken = broken[:1] + (replace(broken[1], reward_components=RewardComponents(
            0.0, 0.0, 1.0)),) + broken[2:]
        diag = validate_dataset(data.header, (EpisodeLog(0, broken),))
        text = '\n'.join(diag.violations)
        assert not diag.ok
        assert 'expected 1' in text
        assert 'done before the last step' in text
        assert 'terminal reward component on a non-final step' in text

    def test_truncated_without_done(self):
        """truncated must imply done"""
        data = random_float_dataset(n_episodes=1)
        tr = data.episodes[0].transitions
        broken = (replace(tr[0], truncated=True),) + tr[1:]
        diag = validate_dataset(data.header, (EpisodeLog(0, broken),))
        assert any('truncated without done' in v for v in diag.violations)

    def test_arrays_and_head(self):
        """Column arrays follow file order and head() keeps leading episodes"""
        data = random_float_dataset(n_episodes=4, length=3)
        arrays = data.arrays
        assert arrays.states.shape == (12, 2)
        np.testing.assert_array_equal(arrays.episode_starts, [0, 3, 6, 9])
        np.testing.assert_array_equal(arrays.episode_index, np.repeat(np.arange(4), 3))
        assert arrays.true_terminal.sum() == 3
        half = data.head(0.5)
        assert half.num_episodes == 2 and half.header.transition_count == 6
        assert data.head(0.01).num_episodes == 1
        assert data.head(1.0) == data
        with self.assertRaises(ValueError):
            data.head(0.0)
