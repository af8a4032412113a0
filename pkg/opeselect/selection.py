"""Selecting candidate state spaces and reward functions from OPE estimates alone.

State-space selection trains one offline policy per candidate state space, fits an FQE evaluator
on the union context for each, and ranks the candidates by their direct-method value estimate.

Reward selection fits, for every candidate reward, an FQE evaluator for a known-good and a
known-bad policy, and measures how well the reward separates the two distributions of
initial-state values. Samples of both policies are standardized together (pooled mean and
standard deviation per reward), histogrammed on fixed bins, and compared by mean difference,
Kullback-Leibler divergence KL(best || worst) and Jensen-Shannon divergence.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import csv
import json
import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import rel_entr
from scipy.stats import kendalltau

from opeselect.datastore import Dataset
from opeselect.env import RewardSpec, StateSpaceSpec
from opeselect.offline_cql import CqlConfig, train_cql
from opeselect.ope import FqeConfig, estimate_dm_fqe, fit_fqe, union_context
from opeselect.policy import PolicyArtifact


DEFAULT_BINS = 50
DEFAULT_RANGE = (-5.0, 5.0)
DEFAULT_SMOOTHING = 1e-8
STATE_COLUMNS = ('rank', 'state_space', 'dimension', 'policy', 'value', 'online_mean',
                 'online_std')
REWARD_COLUMNS = ('reward', 'mean_worst', 'mean_best', 'mean_difference', 'js', 'kl',
                  'degenerate')


@dataclass(frozen=True)
class ReturnDistribution:
    """Initial-state values of one policy under one reward, standardized and histogrammed.

    Parameters:
        policy: Policy name.
        reward_spec: Reward name.
        samples: Raw values Q(s0, pi(s0)), one per logged initial state.
        mean, std: Standardization parameters.
        standardized: ``(samples - mean) / std``; all zero when ``degenerate``.
        bin_edges: Histogram bin edges.
        masses: Histogram masses, summing to 1.
        degenerate: The standard deviation was zero.
    """
    policy: str
    reward_spec: str
    samples: np.ndarray
    mean: float
    std: float
    standardized: np.ndarray
    bin_edges: np.ndarray
    masses: np.ndarray
    degenerate: bool = False

    @classmethod
    def from_samples(cls,
                     samples: Sequence[float],
                     policy: str = '',
                     reward_spec: str = '',
                     mean: Optional[float] = None,
                     std: Optional[float] = None,
                     bins: int = DEFAULT_BINS,
                     value_range: Tuple[float, float] = DEFAULT_RANGE) -> 'ReturnDistribution':
        """Standardizes and histograms samples.

        Args:
            samples: Raw values.
            policy, reward_spec: Labels.
            mean, std: Standardization parameters; default to the samples' own.
            bins: Number of uniform bins.
            value_range: Histogram span in standardized units; values outside are clipped into
                the edge bins.

        Raises:
            ValueError: on an empty sample set or an invalid binning.
        """
        raw = np.asarray(samples, dtype=np.float64)
        if raw.size == 0:
            raise ValueError('ReturnDistribution.from_samples: no samples')
        z, mu, sigma, degenerate = standardize(raw, mean, std)
        edges, masses = histogram(z, bins, value_range)
        return cls(policy, reward_spec, raw, mu, sigma, z, edges, masses, degenerate)


def standardize(samples: np.ndarray,
                mean: Optional[float] = None,
                std: Optional[float] = None) -> Tuple[np.ndarray, float, float, bool]:
    """Z-scores samples with the given or the samples' own mean and standard deviation.

    Returns:
        Tuple of (standardized, mean, std, degenerate). A zero standard deviation is degenerate
        and gives all-zero standardized values.
    """
    x = np.asarray(samples, dtype=np.float64)
    mu = float(np.mean(x)) if mean is None else float(mean)
    sigma = float(np.std(x)) if std is None else float(std)
    if sigma <= 1e-12 * max(1.0, abs(mu)):
        return np.zeros_like(x), mu, sigma, True
    return (x - mu) / sigma, mu, sigma, False


def histogram(values: np.ndarray,
              bins: int = DEFAULT_BINS,
              value_range: Tuple[float, float] = DEFAULT_RANGE) -> Tuple[np.ndarray, np.ndarray]:
    """Masses of ``values`` on uniform bins; out-of-range values count in the edge bins."""
    lo, hi = value_range
    if bins < 1 or not lo < hi:
        raise ValueError(f'histogram: invalid binning {bins} bins over {value_range}')
    counts, edges = np.histogram(np.clip(values, lo, hi), bins=bins, range=(lo, hi))
    return edges, counts / max(len(values), 1)


def _smoothed(p: ReturnDistribution, q: ReturnDistribution, smoothing: float,
              fn_name: str) -> Tuple[np.ndarray, np.ndarray]:
    if p.bin_edges.shape != q.bin_edges.shape or not np.array_equal(p.bin_edges, q.bin_edges):
        raise ValueError(f'{fn_name}: distributions use different bin edges')
    ps = p.masses + smoothing
    qs = q.masses + smoothing
    return ps / ps.sum(), qs / qs.sum()


def kl_divergence(p: ReturnDistribution, q: ReturnDistribution,
                  smoothing: float = DEFAULT_SMOOTHING) -> float:
    """Histogram KL(p || q) after additive smoothing; never negative.

    Raises:
        ValueError: if the two histograms use different bins.
    """
    ps, qs = _smoothed(p, q, smoothing, 'kl_divergence')
    return max(0.0, float(np.sum(rel_entr(ps, qs))))


def js_divergence(p: ReturnDistribution, q: ReturnDistribution,
                  smoothing: float = DEFAULT_SMOOTHING) -> float:
    """Histogram Jensen-Shannon divergence, in [0, ln 2] and symmetric in its arguments.

    Raises:
        ValueError: if the two histograms use different bins.
    """
    ps, qs = _smoothed(p, q, smoothing, 'js_divergence')
    m = 0.5 * (ps + qs)
    js = 0.5 * float(np.sum(rel_entr(ps, m))) + 0.5 * float(np.sum(rel_entr(qs, m)))
    return min(max(js, 0.0), math.log(2.0))


def initial_state_values(dataset: Dataset,
                         policy: PolicyArtifact,
                         reward_spec: RewardSpec,
                         fqe_config: FqeConfig,
                         seed: int,
                         context: Optional[StateSpaceSpec] = None) -> np.ndarray:
    """Fits FQE for ``policy`` under ``reward_spec`` and returns Q(s0, pi(s0)) per episode."""
    fitted = fit_fqe(dataset, policy, reward_spec, context, fqe_config, seed)
    return estimate_dm_fqe(fitted, dataset, policy, seed).contributions


def build_return_distribution(dataset: Dataset,
                              policy: PolicyArtifact,
                              reward_spec: RewardSpec,
                              fqe_config: FqeConfig,
                              seed: int,
                              bins: int = DEFAULT_BINS,
                              value_range: Tuple[float, float] = DEFAULT_RANGE,
                              context: Optional[StateSpaceSpec] = None) -> ReturnDistribution:
    """The self-standardized distribution of a policy's initial-state values under a reward.

    Raises:
        ValueError: if the dataset holds fewer than two episodes.
    """
    if dataset.num_episodes < 2:
        raise ValueError(f'build_return_distribution: need at least 2 initial states, dataset '
                         f'has {dataset.num_episodes}')
    samples = initial_state_values(dataset, policy, reward_spec, fqe_config, seed, context)
    dist = ReturnDistribution.from_samples(samples, policy.name, reward_spec.name,
                                           bins=bins, value_range=value_range)
    if dist.degenerate:
        logging.warning('build_return_distribution: %s under %s has zero spread', policy.name,
                        reward_spec.name)
    return dist


def _run_jobs(fn: Callable[[Any], Any], job_args: Sequence[Any], jobs: int) -> List[Any]:
    """Maps ``fn`` over the arguments, in worker processes when ``jobs > 1``; order kept."""
    if jobs > 1 and len(job_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, job_args))
    return [fn(a) for a in job_args]


def _check_names(names: Sequence[str], fn_name: str) -> None:
    if not names:
        raise ValueError(f'{fn_name}: no candidates given')
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ValueError(f'{fn_name}: duplicate candidate names {duplicates}')


#
# State-space selection

@dataclass(frozen=True)
class StateCandidateRow:
    """One candidate state space with the value estimate of the policy trained on it."""
    name: str
    dimension: int
    policy: str
    value: float
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    online_mean: Optional[float] = None
    online_std: Optional[float] = None


def rank_rows(rows: Sequence[StateCandidateRow]) -> List[StateCandidateRow]:
    """Orders rows by value, descending; ties go to the smaller dimension, then the name."""
    return sorted(rows, key=lambda r: (-r.value, r.dimension, r.name))


@dataclass(frozen=True)
class StateSelectionReport:
    """Ranked candidate state spaces; ``winner`` is the first row.

    ``policies`` holds the trained artifacts by candidate name and is not serialized.
    """
    reward_spec: str
    seed: int
    rows: Tuple[StateCandidateRow, ...]
    winner: str
    policies: Dict[str, PolicyArtifact] = field(default_factory=dict, compare=False, repr=False)

    def with_online(self, audits: Dict[str, Tuple[float, float]]) -> 'StateSelectionReport':
        """Fills the online columns from ground-truth audits, keyed by candidate name."""
        rows = tuple(replace(r, online_mean=audits[r.name][0], online_std=audits[r.name][1])
                     if r.name in audits else r for r in self.rows)
        return replace(self, rows=rows)

    def to_dict(self) -> Dict[str, Any]:
        return {'reward_spec': self.reward_spec,
                'seed': self.seed,
                'winner': self.winner,
                'rows': [{'state_space': r.name, 'dimension': r.dimension, 'policy': r.policy,
                          'value': r.value, 'online_mean': r.online_mean,
                          'online_std': r.online_std, 'diagnostics': r.diagnostics}
                         for r in self.rows]}


def _state_job(args) -> Tuple[StateCandidateRow, PolicyArtifact]:
    spec, dataset, reward_spec, cql_config, fqe_config, seed, context = args
    policy = train_cql(dataset, spec, reward_spec, cql_config, seed)
    fitted = fit_fqe(dataset, policy, reward_spec, context, fqe_config, seed)
    report = estimate_dm_fqe(fitted, dataset, policy, seed)
    row = StateCandidateRow(spec.name, spec.output_dim, policy.name, report.value,
                            {'fqe_final_loss': report.diagnostics['fqe_final_loss'],
                             'episodes': report.diagnostics['episodes']})
    return row, policy


def select_state_space(candidates: Sequence[StateSpaceSpec],
                       dataset: Dataset,
                       reward_spec: RewardSpec,
                       cql_config: CqlConfig,
                       fqe_config: FqeConfig,
                       seed: int,
                       jobs: int = 1,
                       context: Optional[StateSpaceSpec] = None) -> StateSelectionReport:
    """Ranks candidate state spaces by the DM-FQE value of a policy trained on each.

    Args:
        candidates: Candidate state spaces, each a projection of the dataset's union vector.
        dataset: Logged data.
        reward_spec: Reward the policies are trained and evaluated under.
        cql_config: Offline training hyperparameters.
        fqe_config: Evaluator hyperparameters.
        seed: Seed of every training and evaluation job.
        jobs: Worker processes; per-candidate results are merged by candidate name.
        context: Evaluator state context; defaults to the whole union vector.

    Returns:
        StateSelectionReport with rows ranked by rank_rows().

    Raises:
        ValueError: on an empty or duplicated candidate list.
    """
    _check_names([c.name for c in candidates], 'select_state_space')
    context = context or union_context(dataset)
    results = _run_jobs(_state_job, [(c, dataset, reward_spec, cql_config, fqe_config, seed,
                                      context) for c in candidates], jobs)
    by_name = {row.name: (row, policy) for row, policy in results}
    rows = tuple(rank_rows([by_name[n][0] for n in sorted(by_name)]))
    report = StateSelectionReport(reward_spec.name, seed, rows, rows[0].name,
                                  {n: by_name[n][1] for n in sorted(by_name)})
    if len(rows) == 1:
        logging.warning('select_state_space: only one candidate (%s), selection is vacuous',
                        rows[0].name)
    logging.info('select_state_space: winner %s (%s)', report.winner,
                 ', '.join(f'{r.name}={r.value:.4g}' for r in rows))
    return report


#
# Reward selection

@dataclass(frozen=True)
class RewardCandidateRow:
    """Separation of the best and worst policy under one candidate reward.

    Means are in pooled standardized units; ``mean_difference`` is ``mean_best - mean_worst``.
    """
    reward: str
    mean_worst: float
    mean_best: float
    mean_difference: float
    kl: float
    js: float
    degenerate: bool = False
    pooled_mean: float = 0.0
    pooled_std: float = 0.0


@dataclass(frozen=True)
class RewardSelectionReport:
    """Candidate rewards with their separation scores and the winner under each criterion.

    ``winner`` is the mean-difference winner; ``disagreement`` is set when the JS winner differs.
    """
    best_policy: str
    worst_policy: str
    seed: int
    rows: Tuple[RewardCandidateRow, ...]
    winners: Dict[str, str]
    winner: str
    disagreement: bool
    distributions: Dict[str, Tuple[ReturnDistribution, ReturnDistribution]] = \
        field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {'best_policy': self.best_policy,
                'worst_policy': self.worst_policy,
                'seed': self.seed,
                'winner': self.winner,
                'winners': self.winners,
                'disagreement': self.disagreement,
                'rows': [{'reward': r.reward, 'mean_worst': r.mean_worst,
                          'mean_best': r.mean_best, 'mean_difference': r.mean_difference,
                          'js': r.js, 'kl': r.kl, 'degenerate': r.degenerate,
                          'pooled_mean': r.pooled_mean, 'pooled_std': r.pooled_std}
                         for r in self.rows]}


def reward_winner(rows: Sequence[RewardCandidateRow], criterion: str) -> str:
    """Name of the row maximizing ``criterion``; ties go to the lexicographically first name."""
    return min(rows, key=lambda r: (-getattr(r, criterion), r.reward)).reward


def separation_row(reward: str,
                   best_samples: np.ndarray,
                   worst_samples: np.ndarray,
                   bins: int = DEFAULT_BINS,
                   value_range: Tuple[float, float] = DEFAULT_RANGE,
                   smoothing: float = DEFAULT_SMOOTHING,
                   best_policy: str = 'best',
                   worst_policy: str = 'worst') \
        -> Tuple[RewardCandidateRow, ReturnDistribution, ReturnDistribution]:
    """Scores one reward from the raw initial-state values of the two policies."""
    pooled = np.concatenate([best_samples, worst_samples])
    _, mu, sigma, degenerate = standardize(pooled)
    best = ReturnDistribution.from_samples(best_samples, best_policy, reward, mu, sigma, bins,
                                           value_range)
    worst = ReturnDistribution.from_samples(worst_samples, worst_policy, reward, mu, sigma, bins,
                                            value_range)
    mean_best = float(np.mean(best.standardized))
    mean_worst = float(np.mean(worst.standardized))
    row = RewardCandidateRow(reward, mean_worst, mean_best, mean_best - mean_worst,
                             kl_divergence(best, worst, smoothing),
                             js_divergence(best, worst, smoothing), degenerate, mu, sigma)
    return row, best, worst


def _reward_job(args) -> Tuple[RewardCandidateRow, ReturnDistribution, ReturnDistribution]:
    spec, best, worst, dataset, fqe_config, seed, bins, value_range, smoothing = args
    best_samples = initial_state_values(dataset, best, spec, fqe_config, seed)
    worst_samples = initial_state_values(dataset, worst, spec, fqe_config, seed)
    return separation_row(spec.name, best_samples, worst_samples, bins, value_range, smoothing,
                          best.name, worst.name)


def select_reward(candidates: Sequence[RewardSpec],
                  best_policy: PolicyArtifact,
                  worst_policy: PolicyArtifact,
                  dataset: Dataset,
                  fqe_config: FqeConfig,
                  seed: int,
                  jobs: int = 1,
                  bins: int = DEFAULT_BINS,
                  value_range: Tuple[float, float] = DEFAULT_RANGE,
                  smoothing: float = DEFAULT_SMOOTHING) -> RewardSelectionReport:
    """Ranks candidate rewards by how well they separate a good policy from a bad one.

    Args:
        candidates: Candidate rewards, each computable from the logged reward components.
        best_policy: Known-good policy.
        worst_policy: Known-bad policy.
        dataset: Logged data.
        fqe_config: Evaluator hyperparameters.
        seed: Seed of every evaluator fit.
        jobs: Worker processes for the per-reward fits.
        bins, value_range, smoothing: Histogram settings of the divergence estimates.

    Returns:
        RewardSelectionReport with one row per candidate, in candidate order. Rows whose pooled
        spread is zero are flagged degenerate rather than failing the run.

    Raises:
        ValueError: on an empty or duplicated candidate list, or fewer than two episodes.
    """
    _check_names([c.name for c in candidates], 'select_reward')
    if dataset.num_episodes < 2:
        raise ValueError(f'select_reward: need at least 2 initial states, dataset has '
                         f'{dataset.num_episodes}')
    if best_policy.name == worst_policy.name:
        logging.warning('select_reward: best and worst policy are both %s', best_policy.name)
    results = _run_jobs(_reward_job, [(c, best_policy, worst_policy, dataset, fqe_config, seed,
                                       bins, value_range, smoothing) for c in candidates], jobs)
    rows = tuple(r for r, _, _ in results)
    for row in rows:
        if row.degenerate:
            logging.warning('select_reward: %s gives both policies identical values', row.reward)
    winners = {c: reward_winner(rows, c) for c in ('mean_difference', 'js', 'kl')}
    disagreement = winners['js'] != winners['mean_difference']
    if disagreement:
        logging.warning('select_reward: mean-difference winner %s and JS winner %s disagree',
                        winners['mean_difference'], winners['js'])
    logging.info('select_reward: winner %s (%s)', winners['mean_difference'],
                 ', '.join(f'{r.reward}: dV={r.mean_difference:.4g} JS={r.js:.4g}' for r in rows))
    return RewardSelectionReport(best_policy.name, worst_policy.name, seed, rows, winners,
                                 winners['mean_difference'], disagreement,
                                 {r.reward: (b, w) for r, b, w in results})


def ranking_agreement(first: Sequence[float], second: Sequence[float]) -> float:
    """Kendall tau between two scorings of the same items; NaN when either is constant.

    Raises:
        ValueError: if the two scorings have different lengths.
    """
    if len(first) != len(second):
        raise ValueError(f'ranking_agreement: {len(first)} != {len(second)} items')
    tau, _ = kendalltau(first, second)
    return float(tau)


#
# Report files

def _fmt(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'yes' if value else 'no'
    if isinstance(value, float):
        return f'{value:.6g}'
    return str(value)


def _aligned(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [list(header)] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ['  '.join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, '  '.join('-' * w for w in widths))
    return '\n'.join(lines) + '\n'


def _write_all(stem: str, payload: Dict[str, Any], header: Sequence[str],
               rows: Sequence[Sequence[Any]], footer: str) -> List[str]:
    with open(stem + '.json', 'w', encoding='UTF-8', newline='\n') as fh:
        json.dump(payload, fh, indent=2)
        fh.write('\n')
    with open(stem + '.csv', 'w', encoding='UTF-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(header)
        writer.writerows([['' if v is None else repr(float(v)) if isinstance(v, float) else v
                           for v in row] for row in rows])
    with open(stem + '.txt', 'w', encoding='UTF-8', newline='\n') as fh:
        fh.write(_aligned(header, rows))
        fh.write(footer)
    return [stem + '.json', stem + '.csv', stem + '.txt']


def write_state_report(report: StateSelectionReport, stem: str) -> List[str]:
    """Writes ``<stem>.json``, ``<stem>.csv`` and an aligned ``<stem>.txt`` table."""
    rows = [[i + 1, r.name, r.dimension, r.policy, r.value, r.online_mean, r.online_std]
            for i, r in enumerate(report.rows)]
    footer = f'\nwinner: {report.winner}\n'
    return _write_all(stem, report.to_dict(), STATE_COLUMNS, rows, footer)


def write_reward_report(report: RewardSelectionReport, stem: str) -> List[str]:
    """Writes JSON, CSV and text versions of a reward report, one row per candidate."""
    rows = [[r.reward, r.mean_worst, r.mean_best, r.mean_difference, r.js, r.kl, r.degenerate]
            for r in report.rows]
    footer = (f'\nbest policy: {report.best_policy}\nworst policy: {report.worst_policy}\n'
              f'winner (mean difference): {report.winners["mean_difference"]}\n'
              f'winner (JS): {report.winners["js"]}\n'
              f'winner (KL): {report.winners["kl"]}\n')
    if report.disagreement:
        footer += 'note: mean-difference and JS winners disagree\n'
    return _write_all(stem, report.to_dict(), REWARD_COLUMNS, rows, footer)
