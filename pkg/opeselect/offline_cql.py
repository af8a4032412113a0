"""Discrete conservative Q-learning from logged data only.

The loss on a minibatch is the double-Q Bellman regression plus a conservatism penalty that pushes
down the soft maximum of the Q-values relative to the logged action:

.. code-block:: text

    L = 1/2 * mean (Q(s, a) - y) ** 2 + alpha * mean (logsumexp_b Q(s, b) - Q(s, a))

Transitions are projected through the candidate state space and scored with the candidate reward
before training; the environment is never consulted.
"""
from dataclasses import dataclass, replace
import logging
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from opeselect.datastore import Dataset, DatasetError
from opeselect.env import RewardSpec, StateSpaceSpec, apply_reward_spec, project_state
from opeselect.funcapprox import (Gradients, MlpModel, adam_init, adam_step, backward,
                                  forward_with_cache, mlp_init)
from opeselect.policy import PolicyArtifact
from opeselect.qlearning import Batch, double_q_targets, soft_update, taken_action_regression
from opeselect.seeding import rng_stream, stable_hash


LADDER_LABELS = ('worst', 'avg', 'best')
DEFAULT_FRACTIONS = dict(zip(LADDER_LABELS, (0.05, 0.3, 1.0)))


@dataclass(frozen=True)
class CqlConfig:
    """Hyperparameters of one offline training job.

    Parameters:
        alpha: Conservatism coefficient, >= 0. Zero gives plain offline double-DQN.
        gamma: Discount factor, in (0, 1].
        step_size: Adam step size.
        batch_size: Minibatch size.
        gradient_steps: Number of Adam steps.
        tau: Target-network interpolation rate, in (0, 1].
        dataset_fraction: Share of the dataset's episodes (from the start) used for training.
        hidden_sizes: Hidden layer widths of the Q-network.
    """
    alpha: float = 1.0
    gamma: float = 0.99
    step_size: float = 1e-4
    batch_size: int = 128
    gradient_steps: int = 5000
    tau: float = 0.01
    dataset_fraction: float = 1.0
    hidden_sizes: Tuple[int, ...] = (256, 256)

    def __post_init__(self):
        object.__setattr__(self, 'hidden_sizes', tuple(int(h) for h in self.hidden_sizes))
        if self.alpha < 0.0:
            raise ValueError(f'CqlConfig: alpha must be >= 0, got {self.alpha}')
        if not 0.0 < self.dataset_fraction <= 1.0:
            raise ValueError(f'CqlConfig: dataset_fraction must be in (0, 1], got '
                             f'{self.dataset_fraction}')
        if not 0.0 < self.gamma <= 1.0 or not 0.0 < self.tau <= 1.0:
            raise ValueError('CqlConfig: gamma and tau must be in (0, 1]')
        if self.batch_size < 1 or self.gradient_steps < 0 or self.step_size <= 0.0:
            raise ValueError('CqlConfig: batch_size and step_size must be positive, '
                             'gradient_steps non-negative')


def conservative_penalty(q: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Per-row logsumexp_b Q(s, b) - Q(s, a_logged)."""
    return logsumexp(q, axis=1) - q[np.arange(len(q)), actions]


def cql_loss(online: MlpModel,
             target: MlpModel,
             batch: Batch,
             gamma: float,
             alpha: float) -> Tuple[float, Gradients]:
    """Loss and gradients of the conservative Q-learning objective on one batch.

    Args:
        online: Network being trained.
        target: Slow-moving target network for the double-Q targets.
        batch: Projected states, logged actions, candidate rewards and true-terminal flags.
        gamma: Discount factor.
        alpha: Conservatism coefficient; 0 reduces the result to ddqn_update().

    Returns:
        Tuple of (loss, gradients with respect to ``online``).

    Raises:
        ShapeError: if the batch does not fit the networks.
    """
    y = double_q_targets(online, target, batch, gamma)
    targets, weights = taken_action_regression(online, batch, y)
    out, cache = forward_with_cache(online, batch.states)
    n = len(batch)
    err = out - targets
    loss = 0.5 * float(np.sum(weights * err * err)) / n
    d_output = weights * err / n
    if alpha:
        loss += alpha * float(np.mean(conservative_penalty(out, batch.actions)))
        push = softmax(out, axis=1)
        push[np.arange(n), batch.actions] -= 1.0
        d_output = d_output + alpha * push / n
    return loss, backward(online, cache, d_output)


def conservative_gap(model: MlpModel, states: np.ndarray, actions: np.ndarray) -> float:
    """Mean conservatism penalty of ``model`` over projected states and their logged actions."""
    out, _ = forward_with_cache(model, states)
    return float(np.mean(conservative_penalty(out, np.asarray(actions))))


def training_batch(dataset: Dataset,
                   state_spec: StateSpaceSpec,
                   reward_spec: RewardSpec,
                   seed: int) -> Batch:
    """Projects a whole dataset into a candidate (state space, reward) pair.

    Noise features are drawn once per row from the state space's ``train`` stream.

    Raises:
        DatasetError: if the dataset holds no transitions.
        ShapeError: if the state space does not fit the union vector.
    """
    if dataset.num_transitions == 0:
        raise DatasetError('training_batch: dataset has no transitions')
    arrays = dataset.arrays
    noise = rng_stream(seed, f'{state_spec.noise_seed_stream}:train') \
        if state_spec.noise_dims else None
    return Batch(project_state(arrays.states, state_spec, noise),
                 arrays.actions,
                 apply_reward_spec(arrays.components, reward_spec),
                 project_state(arrays.next_states, state_spec, noise),
                 arrays.true_terminal.astype(np.float64))


def train_cql(dataset: Dataset,
              state_spec: StateSpaceSpec,
              reward_spec: RewardSpec,
              config: CqlConfig,
              seed: int) -> PolicyArtifact:
    """Trains a greedy policy for one candidate pair from the first fraction of the dataset.

    Args:
        dataset: Logged data with union vectors.
        state_spec: Candidate state space the policy will read.
        reward_spec: Candidate reward the policy is trained for.
        config: Training hyperparameters.
        seed: Seeds the network initialization and this job's minibatch stream.

    Returns:
        A greedy PolicyArtifact. Identical arguments give identical artifacts.

    Raises:
        DatasetError: on an empty dataset.
        ShapeError: if the state space does not fit the dataset's union vector.
    """
    data = dataset.head(config.dataset_fraction) if dataset.num_episodes else dataset
    full = training_batch(data, state_spec, reward_spec, seed)
    n = len(full)
    online = mlp_init((state_spec.output_dim,) + config.hidden_sizes
                      + (dataset.header.action_count,), seed)
    target = online.copy()
    adam = adam_init(online, config.step_size)
    rng = rng_stream(seed, f'cql-minibatch:{state_spec.name}:{reward_spec.name}:'
                           f'{config.dataset_fraction!r}')
    batch_size = min(config.batch_size, n)
    loss = float('nan')
    for step in range(config.gradient_steps):
        idx = rng.integers(0, n, size=batch_size)
        batch = Batch(full.states[idx], full.actions[idx], full.rewards[idx],
                      full.next_states[idx], full.terminal[idx])
        loss, grads = cql_loss(online, target, batch, config.gamma, config.alpha)
        online, adam = adam_step(online, grads, adam)
        target = soft_update(target, online, config.tau)
        if (step + 1) % 500 == 0:
            logging.debug('train_cql: %s/%s step %s loss %.6f', state_spec.name,
                          reward_spec.name, step + 1, loss)
    logging.info('train_cql: %s/%s fraction %s: %s episodes, %s steps, final loss %.6f',
                 state_spec.name, reward_spec.name, config.dataset_fraction, data.num_episodes,
                 config.gradient_steps, loss)
    return PolicyArtifact(f'cql-{state_spec.name}-{reward_spec.name}-{config.dataset_fraction:g}',
                          online, state_spec, reward_spec.name, 0.0,
                          {'config_hash': stable_hash(config),
                           'seed': seed,
                           'dataset_fraction': config.dataset_fraction,
                           'dataset_episodes': data.num_episodes,
                           'gradient_steps': config.gradient_steps})


def train_cql_ladder(dataset: Dataset,
                     state_spec: StateSpaceSpec,
                     reward_spec: RewardSpec,
                     config: CqlConfig,
                     seed: int,
                     fractions: Optional[Dict[str, float]] = None) -> Dict[str, PolicyArtifact]:
    """Trains one artifact per labelled dataset fraction, by default worst/avg/best."""
    ladder = {}
    for label, fraction in (fractions or DEFAULT_FRACTIONS).items():
        job = replace(config, dataset_fraction=fraction)
        ladder[label] = train_cql(dataset, state_spec, reward_spec, job, seed)
    return ladder

