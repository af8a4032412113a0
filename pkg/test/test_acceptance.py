"""Long-running ordering checks on the lander over three seeds.

Run with ``ORL_SLOW_TESTS=1``; they take tens of minutes. Each property must hold in at least two
of the three seeds.
"""
import logging
import math
import os
import unittest
from unittest import TestCase

import numpy as np

from opeselect.env import DEFAULT_REWARDS, DEFAULT_STATE_SPACES, REWARD_F, S_ORIG
from opeselect.offline_cql import CqlConfig, train_cql_ladder
from opeselect.ope import FqeConfig, estimate_dr, estimate_is, evaluate_policy, fit_fqe
from opeselect.online_collect import DdqnConfig, audit_policy, collect_run
from opeselect.selection import ranking_agreement, select_reward, select_state_space
from opeselect.tabular import (TABULAR_REWARD, TabularMDP, collect_tabular_dataset,
                               deterministic_policy, exact_policy_value,
                               tabular_policy_artifact)

logging.basicConfig(level=logging.INFO)

SLOW = os.environ.get('ORL_SLOW_TESTS') == '1'
SEEDS = (0, 1, 2)
DDQN = DdqnConfig(step_size=5e-4, batch_size=64, replay_capacity=50_000, episodes=300,
                  hidden_sizes=(64, 64), avg_checkpoint_episode=100, moving_average_window=20)
CQL = CqlConfig(step_size=1e-3, batch_size=128, gradient_steps=2000, hidden_sizes=(64, 64))
FQE = FqeConfig(iterations=20, steps_per_iteration=200, hidden_sizes=(64, 64))


def majority(flags):
    return sum(bool(f) for f in flags) >= 2


@unittest.skipUnless(SLOW, 'set ORL_SLOW_TESTS=1 to run the lander acceptance checks')
class TestLanderOrdering(TestCase):
    """Checkpoint, state-space and reward orderings on logged lander data"""

    @classmethod
    def setUpClass(cls):
        cls.runs = {seed: collect_run(DDQN, seed=seed) for seed in SEEDS}

    def test_checkpoint_ordering(self):
        """IS and DM-FQE rank both policy families the way live rollouts do"""
        for family in ('ddqn', 'cql'):
            agree = {'is': [], 'dm': []}
            for seed, result in self.runs.items():
                if family == 'ddqn':
                    policies = [result.checkpoints[k] for k in ('random', 'avg', 'best')]
                else:
                    ladder = train_cql_ladder(result.dataset, S_ORIG, REWARD_F, CQL, seed)
                    policies = [ladder[k] for k in ('worst', 'avg', 'best')]
                online = [audit_policy(p, episodes=100, seed=seed).mean for p in policies]
                estimates = {'is': [], 'dm': []}
                for policy in policies:
                    for report in evaluate_policy(result.dataset, policy, ('is', 'dm'),
                                                  REWARD_F, FQE, seed=seed):
                        estimates[report.estimator].append(report.value)
                logging.info('%s seed %s: online %s, estimates %s', family, seed, online,
                             estimates)
                for estimator, values in estimates.items():
                    agree[estimator].append(ranking_agreement(values, online) == 1.0)
            assert majority(agree['dm']), family
            assert majority(agree['is']), family

    def test_dataset_fraction(self):
        """Training on the whole dataset beats training on its first 5%"""
        better = []
        for seed, result in self.runs.items():
            ladder = train_cql_ladder(result.dataset, S_ORIG, REWARD_F, CQL, seed,
                                      {'worst': 0.05, 'best': 1.0})
            worst, best = (evaluate_policy(result.dataset, ladder[k], ('dm',), REWARD_F, FQE,
                                           seed=seed)[0].value for k in ('worst', 'best'))
            better.append(best > worst)
        assert majority(better)

    def test_state_selection(self):
        """S_orig wins state selection and the OPE order tracks live returns"""
        wins, taus = [], []
        for seed, result in self.runs.items():
            report = select_state_space(DEFAULT_STATE_SPACES, result.dataset, REWARD_F, CQL, FQE,
                                        seed)
            wins.append(report.winner == 'S_orig')
            audits = {name: audit_policy(policy, episodes=50, seed=seed).mean
                      for name, policy in report.policies.items()}
            taus.append(ranking_agreement([r.value for r in report.rows],
                                          [audits[r.name] for r in report.rows]))
        logging.info('state selection Kendall tau per seed: %s', taus)
        assert majority(wins)
        assert majority(t > 0.0 for t in taus if not math.isnan(t))

    def test_reward_selection(self):
        """The composite reward separates the best and worst offline policies most by JS"""
        wins = []
        for seed, result in self.runs.items():
            ladder = train_cql_ladder(result.dataset, S_ORIG, REWARD_F, CQL, seed,
                                      {'worst': 0.05, 'best': 1.0})
            report = select_reward(DEFAULT_REWARDS, ladder['best'], ladder['worst'],
                                   result.dataset, FQE, seed)
            for row in report.rows:
                assert 0.0 <= row.js <= math.log(2.0) and row.kl >= 0.0
            wins.append(report.winners['js'] == 'f')
        assert majority(wins)


@unittest.skipUnless(SLOW, 'set ORL_SLOW_TESTS=1 to run the full-scale tabular checks')
class TestTabularScale(TestCase):
    """Estimator accuracy at 10,000 episodes"""

    def test_is_dr_accuracy_and_variance(self):
        """IS and DR land within 3 standard errors; DR varies less across replications"""
        p = np.zeros((3, 2, 3))
        p[0, 0] = [0.5, 0.5, 0.0]
        p[0, 1] = [0.0, 0.3, 0.7]
        p[1, 0] = [0.2, 0.0, 0.8]
        p[1, 1] = [0.6, 0.4, 0.0]
        p[2, :, 2] = 1.0
        mdp = TabularMDP(p, [[1.0, 0.0], [0.5, 2.0], [0.0, 0.0]], [1.0, 0.0, 0.0],
                         frozenset({2}))
        actions = [1, 0, 0]
        target = tabular_policy_artifact(mdp, actions)
        exact = exact_policy_value(mdp, deterministic_policy(actions, 2), 0.9)
        fqe = FqeConfig(iterations=200, gamma=0.9, solver='lstsq')
        is_values, dr_values = [], []
        for rep in range(20):
            data = collect_tabular_dataset(mdp, np.full((3, 2), 0.5), 10000, horizon=100,
                                           seed=rep)
            is_report = estimate_is(data, target, 0.9, reward_spec=TABULAR_REWARD)
            dr_report = estimate_dr(data, fit_fqe(data, target, TABULAR_REWARD, config=fqe),
                                    target, 0.9)
            if rep == 0:
                for report in (is_report, dr_report):
                    stderr = np.std(report.contributions) / math.sqrt(10000)
                    assert abs(report.value - exact) <= 3 * stderr + 1e-9, report.estimator
            is_values.append(is_report.value)
            dr_values.append(dr_report.value)
        assert np.var(dr_values) <= np.var(is_values)

