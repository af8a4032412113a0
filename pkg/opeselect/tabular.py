"""Tabular MDPs with exact policy values, used as ground truth for the estimators.

A TabularMDP is rendered into the same logged-dataset format as the lander: the union feature
vector is the one-hot encoding of the state, the step reward is stored as the ``state_based``
component, and the behavior propensity of every logged action is exact. Because the exact value
of any policy is a linear solve away, every estimator can be checked against the truth.

Terminal states are absorbing with value zero. Reaching one ends the logged episode as a true
terminal; reaching the horizon ends it as a truncation.
"""
from dataclasses import dataclass
import logging
from typing import FrozenSet, Optional, Sequence

import numpy as np

from opeselect.datastore import Dataset, EpisodeLog, Transition, make_header
from opeselect.env import RewardComponents, RewardSpec, StateSpaceSpec
from opeselect.funcapprox import MlpModel
from opeselect.policy import PolicyArtifact
from opeselect.seeding import rng_stream


@dataclass(frozen=True)
class TabularMDP:
    """A finite MDP.

    Parameters:
        transition: P(s' | s, a), shape (n_states, n_actions, n_states).
        reward: r(s, a), shape (n_states, n_actions).
        initial_dist: Start-state distribution, shape (n_states,).
        terminal_states: Absorbing zero-value states.
    """
    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    terminal_states: FrozenSet[int] = frozenset()

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        d0 = np.asarray(self.initial_dist, dtype=np.float64)
        object.__setattr__(self, 'transition', p)
        object.__setattr__(self, 'reward', r)
        object.__setattr__(self, 'initial_dist', d0)
        object.__setattr__(self, 'terminal_states', frozenset(int(s) for s in
                                                              self.terminal_states))
        n_s, n_a = r.shape
        if p.shape != (n_s, n_a, n_s) or d0.shape != (n_s,):
            raise ValueError(f'TabularMDP: inconsistent shapes P{p.shape} r{r.shape} '
                             f'd0{d0.shape}')
        if np.any(p < 0.0) or np.max(np.abs(p.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError('TabularMDP: every P(.|s,a) row must be a distribution')
        if np.any(d0 < 0.0) or abs(d0.sum() - 1.0) > 1e-12:
            raise ValueError('TabularMDP: initial_dist must be a distribution')
        if any(not 0 <= s < n_s for s in self.terminal_states):
            raise ValueError(f'TabularMDP: terminal state out of range: {self.terminal_states}')

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def feature_names(self) -> tuple:
        return tuple(f's{i}' for i in range(self.n_states))


def _check_policy(mdp: TabularMDP, policy: np.ndarray, gamma: float, fn_name: str) -> np.ndarray:
    pi = np.asarray(policy, dtype=np.float64)
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f'{fn_name}: gamma must be in [0, 1), got {gamma}')
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f'{fn_name}: policy shape {pi.shape} != '
                         f'{(mdp.n_states, mdp.n_actions)}')
    if np.any(pi < 0.0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError(f'{fn_name}: policy rows must be distributions')
    return pi


def exact_state_values(mdp: TabularMDP, policy: np.ndarray, gamma: float) -> np.ndarray:
    """Solves (I - gamma P_pi) V = r_pi for the state values of ``policy``.

    Args:
        mdp: The MDP.
        policy: Action-distribution table, shape (n_states, n_actions).
        gamma: Discount in [0, 1).

    Returns:
        V, shape (n_states,); zero on terminal states.
    """
    pi = _check_policy(mdp, policy, gamma, 'exact_state_values')
    p_pi = np.einsum('sa,sat->st', pi, mdp.transition)
    r_pi = np.sum(pi * mdp.reward, axis=1)
    for s in mdp.terminal_states:
        p_pi[s, :] = 0.0
        r_pi[s] = 0.0
    a = np.eye(mdp.n_states) - gamma * p_pi
    v = np.linalg.solve(a, r_pi)
    residual = float(np.max(np.abs(a @ v - r_pi))) if mdp.n_states else 0.0
    assert residual <= 1e-10 * max(1.0, float(np.max(np.abs(v)))), \
        f'exact_state_values: residual {residual} too large'
    return v


def exact_q_values(mdp: TabularMDP, policy: np.ndarray, gamma: float) -> np.ndarray:
    """Q^pi(s, a) = r(s, a) + gamma * sum_s' P(s'|s,a) V(s'); zero rows on terminal states."""
    v = exact_state_values(mdp, policy, gamma)
    q = mdp.reward + gamma * np.einsum('sat,t->sa', mdp.transition, v)
    for s in mdp.terminal_states:
        q[s, :] = 0.0
    return q


def exact_policy_value(mdp: TabularMDP, policy: np.ndarray, gamma: float) -> float:
    """Expected discounted return of ``policy`` from the initial distribution."""
    return float(mdp.initial_dist @ exact_state_values(mdp, policy, gamma))


def deterministic_policy(actions: Sequence[int], n_actions: int) -> np.ndarray:
    """One-hot action-distribution table for a per-state action choice."""
    acts = np.asarray(actions, dtype=np.int64)
    table = np.zeros((len(acts), n_actions))
    table[np.arange(len(acts)), acts] = 1.0
    return table


def random_tabular_mdp(n_states: int,
                       n_actions: int,
                       seed: int,
                       deterministic: bool = False,
                       terminal_states: Sequence[int] = ()) -> TabularMDP:
    """Draws a random MDP.

    Rewards are uniform on [0, 1). Transition rows are Dirichlet(1) draws, or a single random
    successor per (s, a) when ``deterministic``. The initial distribution is uniform over
    non-terminal states.
    """
    rng = rng_stream(seed, 'tabular-mdp')
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    if deterministic:
        nxt = rng.integers(0, n_states, size=(n_states, n_actions))
        transition = np.zeros((n_states, n_actions, n_states))
        transition[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], nxt] = 1.0
    else:
        transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        transition /= transition.sum(axis=2, keepdims=True)
    start = np.array([0.0 if s in set(terminal_states) else 1.0 for s in range(n_states)])
    return TabularMDP(transition, reward, start / start.sum(), frozenset(terminal_states))


def one_hot_states(n_states: int, states: np.ndarray) -> np.ndarray:
    """One-hot rows for an array of state ids."""
    out = np.zeros((len(states), n_states))
    out[np.arange(len(states)), states] = 1.0
    return out


def collect_tabular_dataset(mdp: TabularMDP,
                            behavior: np.ndarray,
                            n_episodes: int,
                            horizon: int,
                            seed: int,
                            first_episode_id: int = 0) -> Dataset:
    """Logs episodes of ``behavior`` in ``mdp`` in the dataset format.

    Args:
        mdp: The MDP.
        behavior: Behavior action-distribution table, shape (n_states, n_actions); every logged
            action must have positive probability.
        n_episodes: Number of episodes.
        horizon: Step budget; the last step of a budget-limited episode is marked truncated.
        seed: Seed of the ``tabular-rollout`` stream.
        first_episode_id: Id of the first episode.

    Returns:
        A Dataset with one-hot union features.
    """
    rng = rng_stream(seed, 'tabular-rollout')
    n_s, n_a = mdp.n_states, mdp.n_actions
    eye = np.eye(n_s)
    cum_p = np.cumsum(mdp.transition, axis=2)
    cum_b = np.cumsum(behavior, axis=1)
    cum_d0 = np.cumsum(mdp.initial_dist)
    episodes = []
    for k in range(n_episodes):
        ep_id = first_episode_id + k
        s = min(int(np.searchsorted(cum_d0, rng.random(), side='right')), n_s - 1)
        transitions = []
        for t in range(horizon):
            a = min(int(np.searchsorted(cum_b[s], rng.random(), side='right')), n_a - 1)
            s_next = min(int(np.searchsorted(cum_p[s, a], rng.random(), side='right')), n_s - 1)
            terminal = s_next in mdp.terminal_states
            truncated = not terminal and t + 1 == horizon
            transitions.append(Transition(ep_id, t, tuple(eye[s]), a,
                                          RewardComponents(float(mdp.reward[s, a]), 0.0, 0.0),
                                          tuple(eye[s_next]), terminal or truncated, truncated,
                                          float(behavior[s, a])))
            if terminal:
                break
            s = s_next
        episodes.append(EpisodeLog(ep_id, tuple(transitions)))
    logging.debug('collect_tabular_dataset: %s episodes, %s transitions', n_episodes,
                  sum(len(e) for e in episodes))
    return Dataset(make_header(mdp.feature_names, n_a, episodes, collection_seed=seed),
                   tuple(episodes))


def tabular_state_spec(mdp: TabularMDP, name: str = 'one_hot') -> StateSpaceSpec:
    """The identity state space over the one-hot features."""
    return StateSpaceSpec(name, tuple(range(mdp.n_states)))


def q_table_model(q: np.ndarray) -> MlpModel:
    """A linear network whose output on one-hot(s) is the row ``q[s]``."""
    table = np.asarray(q, dtype=np.float64)
    n_s, n_a = table.shape
    return MlpModel((n_s, n_a), [table.T.copy()], [np.zeros(n_a)])


def tabular_policy_artifact(mdp: TabularMDP,
                            actions: Sequence[int],
                            epsilon: float = 0.0,
                            name: Optional[str] = None) -> PolicyArtifact:
    """A policy artifact whose greedy action in state s is ``actions[s]``."""
    model = q_table_model(deterministic_policy(actions, mdp.n_actions))
    return PolicyArtifact(name or f'tabular-{"".join(str(a) for a in actions)}', model,
                          tabular_state_spec(mdp), 'tabular', epsilon)


TABULAR_REWARD = RewardSpec('tabular', include_action_based=False, include_terminal=False)
"""Reward candidate reading the tabular step reward, which is logged as the state_based
component."""
