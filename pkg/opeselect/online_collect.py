"""Double-DQN training on the lander that doubles as the data collector.

Every environment step taken while training is logged as a Transition with the full union state,
all reward components and the exact epsilon-greedy propensity of the logged action. Checkpoints of
the online network become the behavior-quality ladder of the pipeline:

* ``random``: the untrained network
* ``avg``: the network after ``avg_checkpoint_episode`` episodes
* ``best``: the network at the episode with the best moving-average return
* ``episode-<n>``: any extra episode listed in ``checkpoint_episodes``

This is the only module besides the audit helpers that steps the live lander.
"""
from dataclasses import dataclass, field
import csv
import logging
import math
import os
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from opeselect.datastore import (COMPRESSED_SUFFIX, Dataset, EpisodeLog, Transition, make_header,
                                 save_dataset)
from opeselect.env import (ACTION_NAMES, DEFAULT_LANDER, LEFT, MAIN, NOOP, REWARD_F, RIGHT,
                           S_ORIG, UNION_FEATURES, LanderConfig, LanderEnv, RewardSpec,
                           apply_reward_spec)
from opeselect.funcapprox import MlpModel, adam_init, adam_step, forward, mlp_init
from opeselect.policy import PolicyArtifact, save_policy
from opeselect.qlearning import Batch, ddqn_update, double_q_targets, soft_update
from opeselect.seeding import rng_stream, stable_hash


__all__ = ['DdqnConfig', 'ReplayBuffer', 'CollectionResult', 'AuditResult', 'Batch',
           'ddqn_update', 'double_q_targets', 'soft_update', 'epsilon_greedy',
           'epsilon_for_step', 'collect_run', 'save_collection', 'audit_policy',
           'scripted_lander_policy', 'write_learning_curve', 'write_audit_csv']


@dataclass(frozen=True)
class DdqnConfig:
    """Hyperparameters of the collecting DDQN agent.

    Parameters:
        gamma: Discount factor, in (0, 1].
        step_size: Adam step size.
        batch_size: Replay minibatch size; at most ``replay_capacity``.
        tau: Target-network interpolation rate, in (0, 1].
        replay_capacity: Ring-buffer size.
        epsilon_start, epsilon_end: Exploration probability at the first step and after decay.
        epsilon_decay_fraction: Share of the step budget (episodes times the lander's
            ``max_steps``) over which epsilon decays linearly.
        episodes: Number of training (and logged) episodes.
        hidden_sizes: Hidden layer widths of the Q-network.
        avg_checkpoint_episode: Episode count after which the ``avg`` checkpoint is taken.
        checkpoint_episodes: Further episode counts to checkpoint.
        moving_average_window: Window of the learning-curve moving average.
        learning_starts: Replay size before gradient steps begin; 0 means ``batch_size``.
    """
    gamma: float = 0.99
    step_size: float = 5e-5
    batch_size: int = 128
    tau: float = 0.01
    replay_capacity: int = 100_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.2
    episodes: int = 1000
    hidden_sizes: Tuple[int, ...] = (256, 256)
    avg_checkpoint_episode: int = 100
    checkpoint_episodes: Tuple[int, ...] = ()
    moving_average_window: int = 100
    learning_starts: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'hidden_sizes', tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, 'checkpoint_episodes',
                           tuple(int(e) for e in self.checkpoint_episodes))
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f'DdqnConfig: gamma must be in (0, 1], got {self.gamma}')
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f'DdqnConfig: tau must be in (0, 1], got {self.tau}')
        if self.batch_size < 1 or self.batch_size > self.replay_capacity:
            raise ValueError(f'DdqnConfig: batch_size {self.batch_size} must be in '
                             f'[1, replay_capacity={self.replay_capacity}]')
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ValueError('DdqnConfig: need 0 <= epsilon_end <= epsilon_start <= 1')
        if not 0.0 <= self.epsilon_decay_fraction <= 1.0:
            raise ValueError('DdqnConfig: epsilon_decay_fraction must be in [0, 1]')
        if self.episodes < 0 or self.moving_average_window < 1 or self.learning_starts < 0:
            raise ValueError('DdqnConfig: episodes, moving_average_window and learning_starts '
                             'must be non-negative (window positive)')
        if self.step_size <= 0.0:
            raise ValueError(f'DdqnConfig: step_size must be positive, got {self.step_size}')


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions stored as numpy arrays.

    Parameters:
        capacity:
            Maximum number of stored transitions; the oldest is overwritten first.
        state_dim:
            Width of the stored state vectors.
    """

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError(f'ReplayBuffer: capacity must be positive, got {capacity}')
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminal = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, state: np.ndarray, action: int, reward: float, next_state: np.ndarray,
            terminal: bool) -> None:
        """Stores one transition at the cursor."""
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminal[i] = 1.0 if terminal else 0.0
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Draws ``batch_size`` distinct stored transitions uniformly.

        Raises:
            ValueError: if fewer than ``batch_size`` transitions are stored.
        """
        if batch_size > self.size:
            raise ValueError(f'ReplayBuffer.sample: batch of {batch_size} requested from '
                             f'{self.size} stored transitions')
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.terminal[idx])


def epsilon_greedy(q_values: np.ndarray, epsilon: float,
                   rng: np.random.Generator) -> Tuple[int, float]:
    """Draws an action and returns it with its selection probability.

    Args:
        q_values: Q-values of one state, shape (n_actions,).
        epsilon: Exploration probability in [0, 1].
        rng: Generator; not advanced when ``epsilon == 0``.

    Returns:
        Tuple of (action, propensity) with propensity ``epsilon / n + (1 - epsilon) *
        [action is the lowest-index argmax]``.

    Raises:
        ValueError: on an empty Q vector or an epsilon outside [0, 1].
    """
    q = np.asarray(q_values, dtype=np.float64).ravel()
    if q.size == 0:
        raise ValueError('epsilon_greedy: empty Q-value vector')
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f'epsilon_greedy: epsilon {epsilon} not in [0, 1]')
    n = q.size
    greedy = int(np.argmax(q))
    action = greedy
    if epsilon > 0.0 and rng.random() < epsilon:
        action = int(rng.integers(n))
    propensity = epsilon / n + ((1.0 - epsilon) if action == greedy else 0.0)
    return action, propensity


def epsilon_for_step(config: DdqnConfig, step: int, total_steps: int) -> float:
    """Exploration probability at a global environment step.

    Decays linearly from epsilon_start to epsilon_end over the first
    ``epsilon_decay_fraction * total_steps`` steps of the run, then stays at epsilon_end.

    Args:
        config: Agent hyperparameters.
        step: Zero-based step counter over the whole run, not reset between episodes.
        total_steps: Step budget of the run.

    Raises:
        ValueError: on a negative step or step budget.
    """
    if step < 0 or total_steps < 0:
        raise ValueError(f'epsilon_for_step: step {step} and total_steps {total_steps} must be '
                         f'non-negative')
    decay_steps = round(config.epsilon_decay_fraction * total_steps)
    if decay_steps <= 0:
        return config.epsilon_end
    frac = min(1.0, step / decay_steps)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


class LearningCurveRow(NamedTuple):
    episode: int
    episode_return: float
    moving_average: float


@dataclass
class CollectionResult:
    """Everything one collect_run() produces."""
    dataset: Dataset
    checkpoints: Dict[str, PolicyArtifact]
    learning_curve: List[LearningCurveRow] = field(default_factory=list)


def _checkpoint(model: MlpModel, label: str, episode: int, config: DdqnConfig,
                reward_spec: RewardSpec, seed: int) -> PolicyArtifact:
    return PolicyArtifact(f'ddqn-{label}', model.copy(), S_ORIG, reward_spec.name, 0.0,
                          {'checkpoint': label, 'episode': episode, 'seed': seed,
                           'config_hash': stable_hash(config)})


def collect_run(config: DdqnConfig,
                env_config: LanderConfig = DEFAULT_LANDER,
                seed: int = 0,
                reward_spec: RewardSpec = REWARD_F) -> CollectionResult:
    """Trains a DDQN agent on the lander and logs every interaction.

    The agent reads the full union vector and learns from ``reward_spec``; all reward components
    are logged regardless. Episode spawn seeds, exploration and replay sampling each use their
    own stream of ``seed``, so a run is a pure function of its arguments.

    Args:
        config: Agent hyperparameters.
        env_config: Lander constants.
        seed: Run seed.
        reward_spec: Reward the agent maximizes.

    Returns:
        CollectionResult with the logged Dataset (one episode per training episode), the
        checkpoints by label, and the per-episode learning curve.
    """
    env = LanderEnv(env_config)
    n_actions = len(ACTION_NAMES)
    online = mlp_init((len(UNION_FEATURES),) + config.hidden_sizes + (n_actions,), seed)
    target = online.copy()
    adam = adam_init(online, config.step_size)
    replay = ReplayBuffer(config.replay_capacity, len(UNION_FEATURES))
    action_rng = rng_stream(seed, 'ddqn-action')
    replay_rng = rng_stream(seed, 'ddqn-replay')
    episode_seeds = rng_stream(seed, 'episode-seeds').integers(0, 2 ** 31 - 1,
                                                               size=config.episodes)
    learning_starts = config.learning_starts or config.batch_size
    checkpoints = {'random': _checkpoint(online, 'random', 0, config, reward_spec, seed)}
    window = min(config.moving_average_window, config.episodes) if config.episodes else 1
    episodes: List[EpisodeLog] = []
    curve: List[LearningCurveRow] = []
    returns: List[float] = []
    best_average = -math.inf
    best_model, best_episode = online, 0
    total_steps = config.episodes * env_config.max_steps
    global_step = 0
    for e in range(config.episodes):
        s = env.reset(int(episode_seeds[e]))
        transitions = []
        total = 0.0
        t = 0
        while True:
            epsilon = epsilon_for_step(config, global_step, total_steps)
            action, propensity = epsilon_greedy(forward(online, s), epsilon, action_rng)
            step = env.step(action)
            s_next = step.state.as_vector()
            reward = apply_reward_spec(step.components, reward_spec)
            total += reward
            transitions.append(Transition(e, t, tuple(s.tolist()), action, step.components,
                                          tuple(s_next.tolist()), step.done, step.truncated,
                                          propensity))
            replay.add(s, action, reward, s_next, step.done and not step.truncated)
            if len(replay) >= learning_starts:
                batch = replay.sample(config.batch_size, replay_rng)
                _, grads = ddqn_update(online, target, batch, config.gamma)
                online, adam = adam_step(online, grads, adam)
                target = soft_update(target, online, config.tau)
            s = s_next
            t += 1
            global_step += 1
            if step.done:
                break
        episodes.append(EpisodeLog(e, tuple(transitions)))
        returns.append(total)
        moving = float(np.mean(returns[-config.moving_average_window:]))
        curve.append(LearningCurveRow(e + 1, total, moving))
        if e + 1 >= window and moving > best_average:
            best_average, best_model, best_episode = moving, online, e + 1
        if e + 1 == config.avg_checkpoint_episode:
            checkpoints['avg'] = _checkpoint(online, 'avg', e + 1, config, reward_spec, seed)
        if e + 1 in config.checkpoint_episodes:
            checkpoints[f'episode-{e + 1}'] = _checkpoint(online, f'episode-{e + 1}', e + 1,
                                                          config, reward_spec, seed)
        if (e + 1) % 50 == 0 or e + 1 == config.episodes:
            logging.info('collect_run: episode %s return %.2f moving average %.2f epsilon %.3f',
                         e + 1, total, moving, epsilon)
    if config.episodes:
        checkpoints['best'] = _checkpoint(best_model, 'best', best_episode, config, reward_spec,
                                          seed)
        if 'avg' not in checkpoints:
            logging.warning('collect_run: avg checkpoint episode %s beyond %s episodes',
                            config.avg_checkpoint_episode, config.episodes)
    header = make_header(UNION_FEATURES, n_actions, episodes, stable_hash(env_config), seed)
    return CollectionResult(Dataset(header, tuple(episodes)), checkpoints, curve)


def write_learning_curve(path: str, rows: Sequence[LearningCurveRow]) -> None:
    """Writes the learning curve as CSV with columns episode, return, moving_average."""
    with open(path, 'w', encoding='UTF-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['episode', 'return', 'moving_average'])
        for row in rows:
            writer.writerow([row.episode, repr(float(row.episode_return)),
                             repr(float(row.moving_average))])


def save_collection(result: CollectionResult, directory: str) -> List[str]:
    """Writes the dataset, every checkpoint and the learning curve under ``directory``.

    Returns:
        Paths of the written files.
    """
    os.makedirs(os.path.join(directory, 'checkpoints'), exist_ok=True)
    dataset_path = os.path.join(directory, 'dataset' + COMPRESSED_SUFFIX)
    save_dataset(dataset_path, result.dataset)
    written = [dataset_path]
    for label in sorted(result.checkpoints):
        stem = os.path.join(directory, 'checkpoints', f'ddqn-{label}')
        sidecar = save_policy(result.checkpoints[label], stem)
        written.extend([stem + '.orlm', sidecar])
    curve_path = os.path.join(directory, 'learning_curve.csv')
    write_learning_curve(curve_path, result.learning_curve)
    written.append(curve_path)
    return written


def scripted_lander_policy(state: np.ndarray) -> int:
    """A hand-tuned proportional-derivative controller that lands on the default lander's pad.

    Fires the main engine whenever the descent is faster than an altitude-dependent limit,
    otherwise nudges the horizontal position towards the pad center with the side engines.
    """
    x, y, vx, vy = state[0], state[1], state[2], state[3]
    if vy < -(0.15 + 0.4 * y):
        return MAIN
    err = x + 0.8 * vx
    if err > 0.02:
        return RIGHT
    if err < -0.02:
        return LEFT
    return NOOP


@dataclass(frozen=True)
class AuditResult:
    """Ground-truth rollouts of one policy in the live lander."""
    policy: str
    returns: np.ndarray
    discounted_returns: np.ndarray
    lengths: np.ndarray
    landed: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns)) if len(self.returns) else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.returns)) if len(self.returns) else math.nan


def audit_policy(policy: PolicyArtifact | Callable[[np.ndarray], int],
                 env_config: LanderConfig = DEFAULT_LANDER,
                 episodes: int = 100,
                 seed: int = 0,
                 reward_spec: RewardSpec = REWARD_F,
                 gamma: float = 0.99,
                 name: Optional[str] = None) -> AuditResult:
    """Rolls a policy out in the live lander and records its returns.

    This is a ground-truth check that sits outside the offline contract; selection never calls
    it.

    Args:
        policy: A PolicyArtifact, or a callable mapping a union vector to an action.
        env_config: Lander constants.
        episodes: Number of rollouts.
        seed: Seed of the spawn, exploration and noise-feature streams.
        reward_spec: Reward the returns are measured in.
        gamma: Discount of the discounted returns.
        name: Policy label for the result; defaults to the artifact name or the callable's name.

    Returns:
        AuditResult with per-episode undiscounted and discounted returns.
    """
    env = LanderEnv(env_config)
    spawn_seeds = rng_stream(seed, 'audit-episodes').integers(0, 2 ** 31 - 1, size=episodes)
    explore_rng = rng_stream(seed, 'audit-action')
    if isinstance(policy, PolicyArtifact):
        noise_rng = policy.noise_rng(seed, 'audit')
        label = name or policy.name

        def choose(s):
            probs = policy.action_probabilities(s, noise_rng)[0]
            if policy.epsilon == 0.0:
                return int(np.argmax(probs))
            return int(explore_rng.choice(len(probs), p=probs))
    else:
        label = name or getattr(policy, '__name__', 'callable')

        def choose(s):
            return int(policy(s))

    returns, discounted, lengths, landed = [], [], [], []
    for k in range(episodes):
        s = env.reset(int(spawn_seeds[k]))
        total, disc, t = 0.0, 0.0, 0
        while True:
            step = env.step(choose(s))
            r = apply_reward_spec(step.components, reward_spec)
            total += r
            disc += gamma ** t * r
            t += 1
            s = step.state.as_vector()
            if step.done:
                break
        returns.append(total)
        discounted.append(disc)
        lengths.append(t)
        landed.append(step.components.terminal > 0.0)
    result = AuditResult(label, np.array(returns), np.array(discounted),
                         np.array(lengths, dtype=np.int64), np.array(landed, dtype=bool))
    logging.info('audit_policy: %s over %s episodes: mean %.2f std %.2f landed %.2f', label,
                 episodes, result.mean, result.std,
                 float(np.mean(result.landed)) if episodes else math.nan)
    return result


def write_audit_csv(path: str, result: AuditResult) -> None:
    """One CSV row per audited episode."""
    with open(path, 'w', encoding='UTF-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['policy', 'episode', 'return', 'discounted_return', 'length', 'landed'])
        for k in range(len(result.returns)):
            writer.writerow([result.policy, k, repr(float(result.returns[k])),
                             repr(float(result.discounted_returns[k])), int(result.lengths[k]),
                             int(result.landed[k])])
