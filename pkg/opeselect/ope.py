"""Off-policy estimators of a target policy's value from logged data.

* ``is``: trajectory importance sampling, ``mean(W * G)`` with ``W`` the product of per-step
  ratios ``pi(a|s) / mu(a|s)`` and ``G`` the discounted return of the episode
* ``wis``: weighted importance sampling, ``sum(W * G) / sum(W)``
* ``dm``: direct method, the fitted-Q value ``sum_a pi(a|s0) Q(s0, a)`` averaged over the logged
  initial states
* ``dr``: per-decision doubly robust recursion combining the fitted Q with importance corrections

The fitted Q-function comes from fitted-Q evaluation (FQE), an iterated regression on the
bootstrapped targets ``r + gamma * (1 - terminal) * sum_a pi(a|s') Q_prev(s', a)``. Bootstrapping
continues through truncated episode ends and stops at true terminals. The evaluator reads an
evaluation context (normally the union state space) while the evaluated policy reads its own
projection of the same union vectors.

Nothing in this module modifies a dataset.
"""
from dataclasses import dataclass, field
import csv
import json
import logging
import math
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from opeselect.datastore import Dataset, DatasetError
from opeselect.env import REWARD_F, RewardSpec, StateSpaceSpec, apply_reward_spec, project_state
from opeselect.funcapprox import (MlpModel, ShapeError, adam_init, adam_step, forward,
                                  loss_and_grad, mlp_init)
from opeselect.policy import PolicyArtifact
from opeselect.seeding import rng_stream


ESTIMATORS = ('is', 'wis', 'dm', 'dr')
FQE_SOLVERS = ('adam', 'lstsq')
LEDGER_COLUMNS = ('estimator', 'policy', 'reward_spec', 'value', 'episodes',
                  'effective_sample_size', 'weight_max', 'weight_mean', 'fqe_final_loss')


class DegenerateEstimateError(ArithmeticError):
    """Raised when an estimate is undefined, e.g. weighted IS with all-zero weights."""


@dataclass(frozen=True)
class FqeConfig:
    """Hyperparameters of fitted-Q evaluation.

    Parameters:
        iterations: Number of Bellman backups, >= 1.
        steps_per_iteration: Adam steps per backup (``adam`` solver).
        batch_size: Minibatch size (``adam`` solver).
        gamma: Discount factor, in [0, 1].
        step_size: Adam step size.
        hidden_sizes: Hidden widths of the evaluator network (``adam`` solver).
        solver: ``adam`` for a rectifier network trained by Adam, ``lstsq`` for an exact
            per-action least-squares fit of a linear evaluator without intercept.
    """
    iterations: int = 50
    steps_per_iteration: int = 200
    batch_size: int = 128
    gamma: float = 0.99
    step_size: float = 1e-3
    hidden_sizes: Tuple[int, ...] = (64, 64)
    solver: str = 'adam'

    def __post_init__(self):
        object.__setattr__(self, 'hidden_sizes', tuple(int(h) for h in self.hidden_sizes))
        if self.iterations < 1:
            raise ValueError(f'FqeConfig: iterations must be >= 1, got {self.iterations}')
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f'FqeConfig: gamma must be in [0, 1], got {self.gamma}')
        if self.solver not in FQE_SOLVERS:
            raise ValueError(f'FqeConfig: unknown solver {self.solver!r}, expected one of '
                             f'{FQE_SOLVERS}')
        if self.steps_per_iteration < 1 or self.batch_size < 1 or self.step_size <= 0.0:
            raise ValueError('FqeConfig: steps_per_iteration, batch_size and step_size must be '
                             'positive')


@dataclass(frozen=True)
class FittedQ:
    """An FQE evaluator: the network plus the state context and reward it was fitted under."""
    model: MlpModel
    context: StateSpaceSpec
    reward_spec: RewardSpec
    policy_name: str
    gamma: float
    loss_trace: Tuple[float, ...] = ()

    def q_values(self, union_states: np.ndarray) -> np.ndarray:
        """Evaluator Q-values of union states, shape (n, n_actions)."""
        return forward(self.model, project_state(np.atleast_2d(union_states), self.context))


@dataclass(frozen=True)
class OPEReport:
    """One estimate of one policy's value.

    Parameters:
        estimator: One of ESTIMATORS.
        policy: Evaluated policy name.
        reward_spec: Reward the value is measured in.
        value: The estimate.
        contributions: Per-episode terms; their sum (``wis``) or mean (others) is ``value``.
        diagnostics: Effective sample size, weight statistics, FQE loss trace and counts.
    """
    estimator: str
    policy: str
    reward_spec: str
    value: float
    contributions: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise DegenerateEstimateError(f'OPEReport: {self.estimator} estimate of '
                                          f'{self.policy} is not finite: {self.value}')

    def aggregate(self) -> float:
        """Recomputes the value from the per-episode contributions."""
        if self.estimator == 'wis':
            return float(np.sum(self.contributions))
        return float(np.mean(self.contributions))

    def to_dict(self) -> Dict[str, Any]:
        return {'estimator': self.estimator,
                'policy': self.policy,
                'reward_spec': self.reward_spec,
                'value': self.value,
                'diagnostics': self.diagnostics}


def effective_sample_size(weights: Sequence[float]) -> float:
    """Returns (sum w)^2 / sum w^2.

    Raises:
        ValueError: on a negative weight.
        DegenerateEstimateError: if every weight is zero.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0.0):
        raise ValueError('effective_sample_size: weights must be non-negative')
    total_sq = float(np.sum(w * w))
    if total_sq == 0.0:
        raise DegenerateEstimateError('effective_sample_size: all weights are zero')
    return float(np.sum(w)) ** 2 / total_sq


def _require_episodes(dataset: Dataset, fn_name: str) -> None:
    if dataset.num_episodes == 0 or dataset.num_transitions == 0:
        raise DatasetError(f'{fn_name}: dataset has no episodes')
    if np.any(dataset.arrays.propensities <= 0.0):
        raise DatasetError(f'{fn_name}: dataset has a non-positive propensity')


def _target_probabilities(policy: PolicyArtifact, union_states: np.ndarray, seed: int,
                          purpose: str) -> np.ndarray:
    return policy.action_probabilities(union_states, policy.noise_rng(seed, purpose))


def _check_actions(dataset: Dataset, policy: PolicyArtifact, fn_name: str) -> None:
    if policy.action_count != dataset.header.action_count:
        raise ShapeError(f'{fn_name}: policy {policy.name} has {policy.action_count} actions, '
                         f'dataset has {dataset.header.action_count}')


def step_ratios(dataset: Dataset, policy: PolicyArtifact, seed: int = 0) -> np.ndarray:
    """Per-transition importance ratios pi(a_t|s_t) / mu(a_t|s_t)."""
    _check_actions(dataset, policy, 'step_ratios')
    arrays = dataset.arrays
    probs = _target_probabilities(policy, arrays.states, seed, 'ope')
    return probs[np.arange(len(arrays.actions)), arrays.actions] / arrays.propensities


def discounted_returns(dataset: Dataset, reward_spec: RewardSpec, gamma: float) -> np.ndarray:
    """Per-episode discounted return under a candidate reward."""
    arrays = dataset.arrays
    rewards = apply_reward_spec(arrays.components, reward_spec)
    return np.add.reduceat(rewards * gamma ** arrays.t, arrays.episode_starts)


def estimate_is(dataset: Dataset,
                policy: PolicyArtifact,
                gamma: float,
                weighted: bool = False,
                reward_spec: RewardSpec = REWARD_F,
                seed: int = 0) -> OPEReport:
    """Trajectory importance-sampling estimate.

    Args:
        dataset: Logged episodes with propensities.
        policy: Target policy.
        gamma: Discount factor.
        weighted: Normalize by the weight sum (``wis``) instead of the episode count (``is``).
        reward_spec: Reward the returns are measured in.
        seed: Seed of the policy's noise-feature stream.

    Returns:
        OPEReport with per-episode contributions ``W * G`` (``is``) or ``W * G / sum W``
        (``wis``).

    Raises:
        DatasetError: on an empty dataset or a non-positive propensity.
        DegenerateEstimateError: for ``weighted`` when every episode weight is zero.
    """
    _require_episodes(dataset, 'estimate_is')
    arrays = dataset.arrays
    episode_weights = np.multiply.reduceat(step_ratios(dataset, policy, seed),
                                           arrays.episode_starts)
    returns = discounted_returns(dataset, reward_spec, gamma)
    n = len(returns)
    diagnostics = {'episodes': n,
                   'weight_max': float(np.max(episode_weights)),
                   'weight_mean': float(np.mean(episode_weights)),
                   'nonzero_weight_episodes': int(np.count_nonzero(episode_weights))}
    if np.any(episode_weights > 0.0):
        diagnostics['effective_sample_size'] = effective_sample_size(episode_weights)
    else:
        diagnostics['effective_sample_size'] = 0.0
    if weighted:
        total = float(np.sum(episode_weights))
        if total == 0.0:
            raise DegenerateEstimateError(f'estimate_is: every episode weight is zero for '
                                          f'{policy.name}, weighted estimate undefined')
        contributions = episode_weights * returns / total
        value = float(np.sum(contributions))
    else:
        contributions = episode_weights * returns
        value = float(np.mean(contributions))
    if diagnostics['effective_sample_size'] < 0.05 * n:
        logging.warning('estimate_is: low effective sample size %.2f of %s episodes for %s',
                        diagnostics['effective_sample_size'], n, policy.name)
    estimator = 'wis' if weighted else 'is'
    logging.debug('estimate_is: %s %s = %s', estimator, policy.name, value)
    return OPEReport(estimator, policy.name, reward_spec.name, value, contributions, diagnostics)


def _check_context(dataset: Dataset, policy: PolicyArtifact, context: StateSpaceSpec) -> None:
    if context.noise_dims:
        raise ShapeError(f'fit_fqe: evaluator context {context.name} must not carry noise '
                         'features')
    if context.indices and max(context.indices) >= dataset.header.union_dim:
        raise ShapeError(f'fit_fqe: context {context.name} reaches past union dimension '
                         f'{dataset.header.union_dim}')
    outside = sorted(set(policy.state_spec.indices) - set(context.indices))
    if outside:
        raise ShapeError(f'fit_fqe: policy {policy.name} reads union features {outside} that '
                         f'are not in the evaluator context {context.name}')


def union_context(dataset: Dataset) -> StateSpaceSpec:
    """The identity projection over the dataset's union features."""
    return StateSpaceSpec('union', tuple(range(dataset.header.union_dim)))


def _lstsq_fit(x: np.ndarray, actions: np.ndarray, y: np.ndarray,
               n_actions: int) -> Tuple[MlpModel, float]:
    """Per-action least squares of ``y`` on ``x``; actions never logged get zero weights."""
    w = np.zeros((n_actions, x.shape[1]))
    for a in range(n_actions):
        rows = actions == a
        if np.any(rows):
            w[a] = np.linalg.lstsq(x[rows], y[rows], rcond=None)[0]
    model = MlpModel((x.shape[1], n_actions), [w], [np.zeros(n_actions)])
    fitted = np.einsum('nd,nd->n', x, w[actions])
    return model, 0.5 * float(np.mean((fitted - y) ** 2))


def fit_fqe(dataset: Dataset,
            policy: PolicyArtifact,
            reward_spec: RewardSpec,
            context: Optional[StateSpaceSpec] = None,
            config: FqeConfig = FqeConfig(),
            seed: int = 0) -> FittedQ:
    """Fits Q^pi of ``policy`` under ``reward_spec`` by fitted-Q evaluation.

    The target policy's next-state action probabilities are computed once; each iteration
    freezes the previous model, rebuilds the targets and regresses the taken-action output onto
    them.

    Args:
        dataset: Logged episodes.
        policy: Target policy; its state space must be a projection of ``context``.
        reward_spec: Reward to evaluate under.
        context: Evaluator state space; defaults to the dataset's whole union vector.
        config: FQE hyperparameters.
        seed: Seeds the evaluator initialization, minibatches and policy noise features.

    Returns:
        FittedQ with the final model and the per-iteration loss trace.

    Raises:
        DatasetError: on an empty dataset.
        ShapeError: if the policy reads features outside the context.
        FloatingPointError: if the regression loss stops being finite.
    """
    _require_episodes(dataset, 'fit_fqe')
    context = context or union_context(dataset)
    _check_context(dataset, policy, context)
    arrays = dataset.arrays
    n_actions = dataset.header.action_count
    x = project_state(arrays.states, context)
    x_next = project_state(arrays.next_states, context)
    rewards = apply_reward_spec(arrays.components, reward_spec)
    bootstrap = config.gamma * (1.0 - arrays.true_terminal.astype(np.float64))
    pi_next = _target_probabilities(policy, arrays.next_states, seed, 'fqe-next')
    n = len(rewards)
    rows = np.arange(n)
    mask = np.zeros((n, n_actions))
    mask[rows, arrays.actions] = 1.0
    if config.solver == 'lstsq':
        model = MlpModel((x.shape[1], n_actions), [np.zeros((n_actions, x.shape[1]))],
                         [np.zeros(n_actions)])
    else:
        model = mlp_init((x.shape[1],) + config.hidden_sizes + (n_actions,), seed)
        adam = adam_init(model, config.step_size)
        rng = rng_stream(seed, f'fqe-minibatch:{policy.name}:{reward_spec.name}')
    trace = []
    batch_size = min(config.batch_size, n)
    for it in range(config.iterations):
        frozen = model
        y = rewards + bootstrap * np.sum(pi_next * forward(frozen, x_next), axis=1)
        if config.solver == 'lstsq':
            model, loss = _lstsq_fit(x, arrays.actions, y, n_actions)
        else:
            targets = mask * y[:, np.newaxis]
            losses = []
            for _ in range(config.steps_per_iteration):
                idx = rng.integers(0, n, size=batch_size)
                step_loss, grads = loss_and_grad(model, x[idx], targets[idx], mask[idx])
                model, adam = adam_step(model, grads, adam)
                losses.append(step_loss)
            loss = float(np.mean(losses))
        if not math.isfinite(loss):
            raise FloatingPointError(f'fit_fqe: non-finite regression loss at iteration {it + 1}')
        trace.append(loss)
        logging.debug('fit_fqe: %s/%s iteration %s loss %.6g', policy.name, reward_spec.name,
                      it + 1, loss)
    logging.info('fit_fqe: %s/%s %s iterations (%s), final loss %.6g', policy.name,
                 reward_spec.name, config.iterations, config.solver, trace[-1])
    return FittedQ(model, context, reward_spec, policy.name, config.gamma, tuple(trace))


def estimate_dm_fqe(fitted: FittedQ,
                    dataset: Dataset,
                    policy: PolicyArtifact,
                    seed: int = 0) -> OPEReport:
    """Direct-method value: mean over logged initial states of sum_a pi(a|s0) Q(s0, a).

    For a greedy policy this is Q(s0, pi(s0)).

    Raises:
        DatasetError: on an empty dataset.
        ShapeError: if the evaluator context does not fit the dataset.
    """
    _require_episodes(dataset, 'estimate_dm_fqe')
    s0 = dataset.arrays.initial_states
    probs = _target_probabilities(policy, s0, seed, 'dm')
    contributions = np.sum(probs * fitted.q_values(s0), axis=1)
    value = float(np.mean(contributions))
    diagnostics = {'episodes': len(contributions),
                   'fqe_final_loss': fitted.loss_trace[-1] if fitted.loss_trace else None,
                   'fqe_loss_trace': list(fitted.loss_trace)}
    logging.debug('estimate_dm_fqe: %s = %s', policy.name, value)
    return OPEReport('dm', policy.name, fitted.reward_spec.name, value, contributions,
                     diagnostics)


def estimate_dr(dataset: Dataset,
                fitted: FittedQ,
                policy: PolicyArtifact,
                gamma: float,
                seed: int = 0) -> OPEReport:
    """Per-decision doubly robust estimate.

    Walking each episode backwards,
    ``V_DR(t) = V(s_t) + rho_t * (r_t + gamma * V_DR(t + 1) - Q(s_t, a_t))`` with
    ``V(s) = sum_a pi(a|s) Q(s, a)``. Past a true terminal ``V_DR`` is 0; past a truncated end
    it is ``V(s_next)``, matching the FQE bootstrap.

    Args:
        dataset: Logged episodes with propensities.
        fitted: FQE evaluator fitted for the same reward.
        policy: Target policy.
        gamma: Discount factor.
        seed: Seed of the policy's noise-feature streams.

    Returns:
        OPEReport whose per-episode contributions are V_DR(0).

    Raises:
        DatasetError: on an empty dataset or a non-positive propensity.
    """
    _require_episodes(dataset, 'estimate_dr')
    reward_spec = fitted.reward_spec
    arrays = dataset.arrays
    n = len(arrays.actions)
    rows = np.arange(n)
    rewards = apply_reward_spec(arrays.components, reward_spec)
    _check_actions(dataset, policy, 'estimate_dr')
    probs = _target_probabilities(policy, arrays.states, seed, 'ope')
    ratios = probs[rows, arrays.actions] / arrays.propensities
    q = fitted.q_values(arrays.states)
    v = np.sum(probs * q, axis=1)
    q_taken = q[rows, arrays.actions]
    v_next = np.sum(_target_probabilities(policy, arrays.next_states, seed, 'dr-next')
                    * fitted.q_values(arrays.next_states), axis=1)
    tail = np.where(arrays.truncated, v_next, 0.0)
    v_dr = np.zeros(n)
    for i in reversed(range(n)):
        after = tail[i] if arrays.done[i] else v_dr[i + 1]
        v_dr[i] = v[i] + ratios[i] * (rewards[i] + gamma * after - q_taken[i])
    contributions = v_dr[arrays.episode_starts]
    value = float(np.mean(contributions))
    cumulative = np.multiply.reduceat(ratios, arrays.episode_starts)
    diagnostics = {'episodes': len(contributions),
                   'weight_max': float(np.max(cumulative)),
                   'weight_mean': float(np.mean(cumulative)),
                   'effective_sample_size': effective_sample_size(cumulative)
                   if np.any(cumulative > 0.0) else 0.0,
                   'fqe_final_loss': fitted.loss_trace[-1] if fitted.loss_trace else None}
    logging.debug('estimate_dr: %s = %s', policy.name, value)
    return OPEReport('dr', policy.name, reward_spec.name, value, contributions, diagnostics)


def evaluate_policy(dataset: Dataset,
                    policy: PolicyArtifact,
                    estimators: Sequence[str] = ESTIMATORS,
                    reward_spec: RewardSpec = REWARD_F,
                    config: FqeConfig = FqeConfig(),
                    context: Optional[StateSpaceSpec] = None,
                    seed: int = 0) -> List[OPEReport]:
    """Runs the requested estimators in order, fitting FQE once if ``dm`` or ``dr`` is asked.

    Raises:
        ValueError: on an unknown estimator id.
    """
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise ValueError(f'evaluate_policy: unknown estimators {unknown}, expected a subset of '
                         f'{ESTIMATORS}')
    fitted = None
    if {'dm', 'dr'} & set(estimators):
        fitted = fit_fqe(dataset, policy, reward_spec, context, config, seed)
    reports = []
    for estimator in estimators:
        if estimator in ('is', 'wis'):
            reports.append(estimate_is(dataset, policy, config.gamma, estimator == 'wis',
                                       reward_spec, seed))
        elif estimator == 'dm':
            reports.append(estimate_dm_fqe(fitted, dataset, policy, seed))
        else:
            reports.append(estimate_dr(dataset, fitted, policy, config.gamma, seed))
    return reports


def write_report_json(path: str, reports: Sequence[OPEReport]) -> None:
    """Writes reports as a JSON list, one object per estimate."""
    with open(path, 'w', encoding='UTF-8', newline='\n') as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)
        fh.write('\n')


def _ledger_row(r: OPEReport) -> List[str]:
    d = r.diagnostics
    return [r.estimator, r.policy, r.reward_spec, repr(float(r.value)),
            str(d.get('episodes', '')), _cell(d.get('effective_sample_size')),
            _cell(d.get('weight_max')), _cell(d.get('weight_mean')),
            _cell(d.get('fqe_final_loss'))]


def append_ledger(path: str, reports: Sequence[OPEReport]) -> None:
    """Adds one CSV row per report to the results ledger.

    A row whose (estimator, policy, reward_spec) already appears replaces the earlier row in
    place, so re-running an evaluation leaves the ledger unchanged.

    Raises:
        ValueError: if an existing ledger has a different header.
    """
    rows: List[List[str]] = []
    if os.path.exists(path) and os.path.getsize(path) > 0:
        with open(path, encoding='UTF-8', newline='') as fh:
            existing = list(csv.reader(fh))
        if tuple(existing[0]) != LEDGER_COLUMNS:
            raise ValueError(f'append_ledger: {path}: unexpected header {existing[0]}')
        rows = existing[1:]
    index = {tuple(row[:3]): i for i, row in enumerate(rows)}
    for r in reports:
        row = _ledger_row(r)
        key = tuple(row[:3])
        if key in index:
            rows[index[key]] = row
        else:
            index[key] = len(rows)
            rows.append(row)
    with open(path, 'w', encoding='UTF-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(LEDGER_COLUMNS)
        writer.writerows(rows)


def _cell(value: Optional[float]) -> str:
    return '' if value is None else repr(float(value))
