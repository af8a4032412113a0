"""Command-line front end: ``opeselect <command> [options]``.

Commands:

* ``print-config``: print the effective config as TOML
* ``collect``: train the DDQN collector and log the dataset, checkpoints and learning curve
* ``train-offline``: train a CQL policy (or the worst/avg/best ladder) for one candidate state
  space and reward
* ``evaluate``: run OPE estimators on a policy artifact
* ``select-state``: rank the candidate state spaces
* ``select-reward``: rank the candidate rewards by best/worst policy separation
* ``audit-online``: roll a policy out in the live lander (ground truth, outside the offline
  contract)

Every command except ``collect`` and ``audit-online`` runs with the live environment disabled.
Outputs go to ``<output_dir>/<config-hash>/<seed>/`` next to a ``manifest.json``.

Exit codes: 0 success, 1 usage or config error, 2 validation error, 3 numerical failure.
"""
import argparse
from dataclasses import replace
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from opeselect import __version__
from opeselect.config import (ConfigError, PipelineConfig, config_hash, find_reward,
                              find_state_space, load_config, render_config, resolve_seeds,
                              run_directory, write_manifest)
from opeselect.datastore import DatasetError, read_dataset
from opeselect.env import offline_only
from opeselect.funcapprox import ShapeError
from opeselect.offline_cql import LADDER_LABELS, train_cql, train_cql_ladder
from opeselect.online_collect import (audit_policy, collect_run, save_collection,
                                      scripted_lander_policy, write_audit_csv)
from opeselect.ope import ESTIMATORS, append_ledger, evaluate_policy, write_report_json
from opeselect.policy import load_policy, save_policy
from opeselect.selection import (ranking_agreement, select_reward, select_state_space,
                                 write_reward_report, write_state_report)


PROG = 'opeselect'
EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


class _ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage-error code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{PROG}: error: {message}\n')


def build_parser() -> argparse.ArgumentParser:
    """Creates the argument parser with one subcommand per pipeline stage."""
    common = _ArgumentParser(add_help=False)
    common.add_argument('--config', help='TOML config file; defaults apply without one')
    common.add_argument('--seed', type=int, help='run only this seed (overrides ORL_SEED)')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='log debug detail')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='log warnings only')

    parser = _ArgumentParser(prog=PROG, description='Offline RL design selection by '
                                                    'off-policy evaluation.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True, metavar='command')

    sub.add_parser('print-config', parents=[common], help='print the effective config')

    p = sub.add_parser('collect', parents=[common], help='train DDQN and log the dataset')
    p.add_argument('--episodes', type=int, help='override ddqn.episodes')

    p = sub.add_parser('train-offline', parents=[common], help='train one CQL policy')
    p.add_argument('--dataset', required=True)
    p.add_argument('--state-space', required=True, help='candidate state-space name')
    p.add_argument('--reward', help='candidate reward name (default: primary reward)')
    size = p.add_mutually_exclusive_group()
    size.add_argument('--fraction', type=float, help='override cql.dataset_fraction')
    size.add_argument('--ladder', action='store_true',
                      help='train the worst/avg/best ladder at selection.fractions')
    p.add_argument('--output', help='artifact stem (default: <run dir>/policies/<name>)')

    p = sub.add_parser('evaluate', parents=[common], help='estimate a policy value offline')
    p.add_argument('--dataset', required=True)
    p.add_argument('--policy', required=True, help='policy artifact (.json, .orlm or stem)')
    p.add_argument('--estimator', help=f'comma-separated subset of {",".join(ESTIMATORS)}')
    p.add_argument('--reward', help='candidate reward name (default: primary reward)')
    p.add_argument('--epsilon', type=float, help='evaluate the artifact as epsilon-greedy')
    p.add_argument('--ledger', help='CSV results ledger (default: <run dir>/ope_ledger.csv)')

    p = sub.add_parser('select-state', parents=[common], help='rank candidate state spaces')
    p.add_argument('--dataset', required=True)
    p.add_argument('--reward', help='candidate reward name (default: primary reward)')
    p.add_argument('--jobs', type=int, help='worker processes (default: selection.jobs)')
    p.add_argument('--audit-episodes', type=int, default=0,
                   help='also audit every trained policy live for N episodes')

    p = sub.add_parser('select-reward', parents=[common], help='rank candidate rewards')
    p.add_argument('--dataset', required=True)
    p.add_argument('--best', required=True, help='known-good policy artifact')
    p.add_argument('--worst', required=True, help='known-bad policy artifact')
    p.add_argument('--jobs', type=int, help='worker processes (default: selection.jobs)')

    p = sub.add_parser('audit-online', parents=[common],
                       help='ground-truth live rollouts (outside the offline contract)')
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument('--policy', help='policy artifact')
    target.add_argument('--scripted', action='store_true',
                        help='audit the scripted landing controller')
    p.add_argument('--episodes', type=int, help='rollouts (default: selection.audit_episodes)')
    p.add_argument('--reward', help='candidate reward name (default: primary reward)')
    p.add_argument('--output', help='CSV path (default: <run dir>/audit-<policy>.csv)')
    return parser


def _reward(cfg: PipelineConfig, name: Optional[str]):
    return find_reward(cfg, name or cfg.selection.primary_reward)


def _read_dataset(path: str):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise DatasetError(f'read_dataset: {path}: no such dataset file') from exc


def cmd_print_config(args, cfg: PipelineConfig) -> List[str]:
    sys.stdout.write(render_config(cfg))
    return []


def cmd_collect(args, cfg: PipelineConfig) -> List[str]:
    """Runs collect_run() per seed and writes its files into each run directory."""
    if args.episodes is not None:
        if args.episodes < 0:
            raise ConfigError(f'cmd_collect: --episodes must be >= 0, got {args.episodes}')
        cfg = replace(cfg, ddqn=replace(cfg.ddqn, episodes=args.episodes))
    written = []
    for seed in resolve_seeds(cfg, args.seed):
        directory = run_directory(cfg, seed)
        result = collect_run(cfg.ddqn, cfg.env, seed, _reward(cfg, None))
        written.extend(save_collection(result, directory))
        written.append(write_manifest(directory, cfg, seed))
    return written


def cmd_train_offline(args, cfg: PipelineConfig) -> List[str]:
    """Trains one CQL artifact, or with ``--ladder`` one per configured dataset fraction.

    Ladder artifacts are saved under ``<stem>-<label>``, where the stem defaults to
    ``<run dir>/policies/cql-<state space>-<reward>``.
    """
    seed = resolve_seeds(cfg, args.seed)[0]
    state_spec = find_state_space(cfg, args.state_space)
    reward_spec = _reward(cfg, args.reward)
    directory = run_directory(cfg, seed)
    with offline_only():
        dataset = _read_dataset(args.dataset)
        if args.ladder:
            fractions = dict(zip(LADDER_LABELS, cfg.selection.fractions))
            ladder = train_cql_ladder(dataset, state_spec, reward_spec, cfg.cql, seed, fractions)
            base = args.output or os.path.join(directory, 'policies',
                                               f'cql-{state_spec.name}-{reward_spec.name}')
            stems = {f'{base}-{label}': policy for label, policy in ladder.items()}
        else:
            cql = cfg.cql if args.fraction is None \
                else replace(cfg.cql, dataset_fraction=args.fraction)
            policy = train_cql(dataset, state_spec, reward_spec, cql, seed)
            stems = {args.output or os.path.join(directory, 'policies', policy.name): policy}
    written = []
    for stem, policy in stems.items():
        os.makedirs(os.path.dirname(stem) or '.', exist_ok=True)
        written.extend([stem + '.orlm', save_policy(policy, stem)])
    written.append(write_manifest(directory, cfg, seed))
    return written


def cmd_evaluate(args, cfg: PipelineConfig) -> List[str]:
    """Runs the requested estimators and records them as JSON plus ledger rows."""
    seed = resolve_seeds(cfg, args.seed)[0]
    estimators = tuple(e.strip() for e in args.estimator.split(',')) if args.estimator \
        else cfg.selection.estimators
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise ConfigError(f'cmd_evaluate: unknown estimators {unknown}, expected a subset of '
                          f'{list(ESTIMATORS)}')
    reward_spec = _reward(cfg, args.reward)
    directory = run_directory(cfg, seed)
    with offline_only():
        dataset = _read_dataset(args.dataset)
        policy = load_policy(args.policy)
        if args.epsilon is not None:
            policy = policy.with_epsilon(args.epsilon, f'{policy.name}-eps{args.epsilon:g}')
        reports = evaluate_policy(dataset, policy, estimators, reward_spec, cfg.fqe, None, seed)
    report_path = os.path.join(directory, f'ope-{policy.name}-{reward_spec.name}.json')
    write_report_json(report_path, reports)
    ledger = args.ledger or os.path.join(directory, 'ope_ledger.csv')
    append_ledger(ledger, reports)
    for r in reports:
        logging.info('cmd_evaluate: %s %s = %.6g', r.estimator, r.policy, r.value)
    return [report_path, ledger, write_manifest(directory, cfg, seed)]


def cmd_select_state(args, cfg: PipelineConfig) -> List[str]:
    """State-space selection, optionally followed by a live audit of the trained policies."""
    seed = resolve_seeds(cfg, args.seed)[0]
    reward_spec = _reward(cfg, args.reward)
    directory = run_directory(cfg, seed)
    with offline_only():
        dataset = _read_dataset(args.dataset)
        report = select_state_space(cfg.state_spaces, dataset, reward_spec, cfg.cql, cfg.fqe,
                                    seed, args.jobs or cfg.selection.jobs)
    written = []
    for name, policy in report.policies.items():
        stem = os.path.join(directory, 'policies', f'state-{name}')
        os.makedirs(os.path.dirname(stem), exist_ok=True)
        written.extend([stem + '.orlm', save_policy(policy, stem)])
    if args.audit_episodes:
        audits = {}
        for name, policy in report.policies.items():
            result = audit_policy(policy, cfg.env, args.audit_episodes, seed, reward_spec)
            audits[name] = (result.mean, result.std)
        report = report.with_online(audits)
        tau = ranking_agreement([r.value for r in report.rows],
                                [r.online_mean for r in report.rows])
        logging.info('cmd_select_state: OPE / online ranking agreement (Kendall tau) %.3f', tau)
    stem = os.path.join(directory, f'state_selection-{config_hash(cfg)}-seed{seed}')
    written.extend(write_state_report(report, stem))
    written.append(write_manifest(directory, cfg, seed))
    return written


def cmd_select_reward(args, cfg: PipelineConfig) -> List[str]:
    """Reward selection between a known-good and a known-bad artifact."""
    seed = resolve_seeds(cfg, args.seed)[0]
    directory = run_directory(cfg, seed)
    sel = cfg.selection
    with offline_only():
        dataset = _read_dataset(args.dataset)
        best = load_policy(args.best)
        worst = load_policy(args.worst)
        report = select_reward(cfg.rewards, best, worst, dataset, cfg.fqe, seed,
                               args.jobs or sel.jobs, sel.bins, sel.value_range, sel.smoothing)
    stem = os.path.join(directory, f'reward_selection-{config_hash(cfg)}-seed{seed}')
    written = write_reward_report(report, stem)
    written.append(write_manifest(directory, cfg, seed))
    return written


def cmd_audit_online(args, cfg: PipelineConfig) -> List[str]:
    """Live rollouts of an artifact or of the scripted controller."""
    seed = resolve_seeds(cfg, args.seed)[0]
    episodes = cfg.selection.audit_episodes if args.episodes is None else args.episodes
    reward_spec = _reward(cfg, args.reward)
    directory = run_directory(cfg, seed)
    policy = scripted_lander_policy if args.scripted else load_policy(args.policy)
    result = audit_policy(policy, cfg.env, episodes, seed, reward_spec, cfg.ddqn.gamma,
                          'scripted' if args.scripted else None)
    path = args.output or os.path.join(directory, f'audit-{result.policy}.csv')
    write_audit_csv(path, result)
    return [path, write_manifest(directory, cfg, seed)]


COMMANDS = {'print-config': cmd_print_config,
            'collect': cmd_collect,
            'train-offline': cmd_train_offline,
            'evaluate': cmd_evaluate,
            'select-state': cmd_select_state,
            'select-reward': cmd_select_reward,
            'audit-online': cmd_audit_online}


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(f'{PROG}: error: {exc}\n')
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parses ``argv``, runs the command and maps errors to exit codes."""
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level)
    try:
        cfg = load_config(args.config)
        written = COMMANDS[args.command](args, cfg)
    except np.linalg.LinAlgError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (DatasetError, ShapeError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    except ArithmeticError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (ConfigError, ValueError, OSError) as exc:
        return _fail(EXIT_USAGE, exc)
    for path in written:
        logging.debug('main: wrote %s', path)
    return EXIT_OK
