"""Double-Q targets, the DDQN loss and target-network interpolation.

Shared by online DDQN collection and offline conservative Q-learning. Nothing here touches the
environment: a Batch is plain arrays.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from opeselect.funcapprox import Gradients, MlpModel, ShapeError, forward, loss_and_grad


@dataclass(frozen=True)
class Batch:
    """A minibatch of transitions in some state space.

    ``terminal`` is 1.0 only for true terminals; truncated steps carry 0.0 so that targets keep
    bootstrapping through them.
    """
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray

    def __post_init__(self):
        n = len(self.states)
        if n == 0:
            raise ShapeError('Batch: empty batch')
        if not (len(self.actions) == len(self.rewards) == len(self.next_states)
                == len(self.terminal) == n):
            raise ShapeError('Batch: field lengths differ')
        if np.shape(self.next_states) != np.shape(self.states):
            raise ShapeError(f'Batch: next_states shape {np.shape(self.next_states)} != states '
                             f'shape {np.shape(self.states)}')

    def __len__(self):
        return len(self.states)


def double_q_targets(online: MlpModel,
                     target: MlpModel,
                     batch: Batch,
                     gamma: float) -> np.ndarray:
    """y = r + gamma * (1 - terminal) * Q_target(s', argmax_a Q_online(s', a))."""
    next_online = forward(online, batch.next_states)
    next_target = forward(target, batch.next_states)
    best = np.argmax(next_online, axis=1)
    bootstrap = next_target[np.arange(len(batch)), best]
    return batch.rewards + gamma * (1.0 - batch.terminal) * bootstrap


def taken_action_regression(model: MlpModel,
                            batch: Batch,
                            y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Builds (targets, output weights) that regress only the taken action's output onto ``y``."""
    n = len(batch)
    weights = np.zeros((n, model.output_dim))
    weights[np.arange(n), batch.actions] = 1.0
    targets = np.zeros((n, model.output_dim))
    targets[np.arange(n), batch.actions] = y
    return targets, weights


def ddqn_update(online: MlpModel,
                target: MlpModel,
                batch: Batch,
                gamma: float) -> Tuple[float, Gradients]:
    """Loss and gradients of the double-DQN regression on one batch.

    The loss is half the mean squared error between Q_online(s, a) of the taken action and the
    double-Q target; other outputs carry zero weight.

    Returns:
        Tuple of (loss, gradients with respect to the online network).

    Raises:
        ShapeError: if the batch does not fit the networks.
    """
    if online.layer_sizes != target.layer_sizes:
        raise ShapeError(f'ddqn_update: online {online.layer_sizes} and target '
                         f'{target.layer_sizes} networks differ')
    y = double_q_targets(online, target, batch, gamma)
    targets, weights = taken_action_regression(online, batch, y)
    return loss_and_grad(online, batch.states, targets, weights)


def soft_update(target: MlpModel, online: MlpModel, tau: float) -> MlpModel:
    """Returns tau * online + (1 - tau) * target, parameter by parameter."""
    if target.layer_sizes != online.layer_sizes:
        raise ShapeError(f'soft_update: shapes {target.layer_sizes} and {online.layer_sizes} '
                         'differ')
    if tau == 1.0:
        return online.copy()
    return MlpModel(target.layer_sizes,
                    [tau * o + (1.0 - tau) * t for t, o in zip(target.weights, online.weights)],
                    [tau * o + (1.0 - tau) * t for t, o in zip(target.biases, online.biases)],
                    target.init_seed)
