"""Serialized Q-network policies.

A PolicyArtifact bundles a Q-network with the candidate state space it reads and an
action-selection rule. It is what online collection checkpoints, what offline training returns,
and what every estimator evaluates. Artifacts are saved as two files sharing a stem: the model in
the flat binary format (``<stem>.orlm``) and a JSON sidecar (``<stem>.json``) holding the state
space, reward name, selection rule and provenance metadata.
"""
from dataclasses import dataclass, field, replace
import json
import logging
import os
from typing import Any, Dict, Optional

import numpy as np

from opeselect.env import StateSpaceSpec, project_state
from opeselect.funcapprox import MlpModel, ShapeError, forward, model_from_bytes, model_to_bytes
from opeselect.seeding import rng_stream


MODEL_SUFFIX = '.orlm'
SIDECAR_SUFFIX = '.json'


@dataclass(frozen=True)
class PolicyArtifact:
    """A Q-network policy over a candidate state space.

    With ``epsilon == 0`` the rule is greedy: probability 1 on the lowest-index argmax of the
    Q-values, 0 elsewhere. With ``epsilon > 0`` it is epsilon-greedy: ``epsilon / |A|`` on every
    action plus ``1 - epsilon`` on the greedy one.

    Parameters:
        name:
            Policy id used in reports.
        q_model:
            Q-network; input width equals ``state_spec.output_dim``, output width the action
            count.
        state_spec:
            State space the policy reads, as a projection of the union vector.
        reward_spec_name:
            Name of the reward the policy was trained for.
        epsilon:
            Exploration probability of the selection rule.
        metadata:
            Provenance: training config hash, seeds, dataset fraction, checkpoint episode.
    """
    name: str
    q_model: MlpModel
    state_spec: StateSpaceSpec
    reward_spec_name: str = ''
    epsilon: float = 0.0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.q_model.input_dim != self.state_spec.output_dim:
            raise ShapeError(f'PolicyArtifact: {self.name}: model input width '
                             f'{self.q_model.input_dim} != state space {self.state_spec.name} '
                             f'dimension {self.state_spec.output_dim}')
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f'PolicyArtifact: {self.name}: epsilon {self.epsilon} not in [0, 1]')

    @property
    def action_count(self) -> int:
        return self.q_model.output_dim

    @property
    def selection_rule(self) -> str:
        return 'greedy' if self.epsilon == 0.0 else 'epsilon-greedy'

    def noise_rng(self, seed: int, purpose: str) -> Optional[np.random.Generator]:
        """Generator for this policy's state-space noise features, one stream per purpose."""
        if self.state_spec.noise_dims == 0:
            return None
        return rng_stream(seed, f'{self.state_spec.noise_seed_stream}:{purpose}')

    def q_values(self, union_states: np.ndarray,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Q-values of union states after projection into the policy's state space."""
        return forward(self.q_model, project_state(union_states, self.state_spec, rng))

    def greedy_actions(self, union_states: np.ndarray,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Lowest-index argmax action per row of a batch of union states."""
        q = self.q_values(np.atleast_2d(union_states), rng)
        return np.argmax(q, axis=1)

    def action_probabilities(self, union_states: np.ndarray,
                             rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Selection-rule probabilities, shape (n, action_count)."""
        greedy = self.greedy_actions(union_states, rng)
        probs = np.full((len(greedy), self.action_count), self.epsilon / self.action_count)
        probs[np.arange(len(greedy)), greedy] += 1.0 - self.epsilon
        return probs

    def with_epsilon(self, epsilon: float, name: Optional[str] = None) -> 'PolicyArtifact':
        """Returns the same network under an epsilon-greedy (or greedy, for 0) rule."""
        return replace(self, epsilon=float(epsilon), name=name or self.name)


def _sidecar(policy: PolicyArtifact, model_file: str) -> Dict[str, Any]:
    spec = policy.state_spec
    rule = {'kind': policy.selection_rule}
    if policy.epsilon:
        rule['epsilon'] = policy.epsilon
    return {'name': policy.name,
            'model_file': model_file,
            'state_spec': {'name': spec.name,
                           'indices': list(spec.indices),
                           'noise_dims': spec.noise_dims,
                           'noise_seed_stream': spec.noise_seed_stream},
            'reward_spec': policy.reward_spec_name,
            'action_count': policy.action_count,
            'selection_rule': rule,
            'metadata': policy.metadata}


def artifact_stem(path: str) -> str:
    """Strips a model or sidecar suffix, leaving the shared stem."""
    for suffix in (MODEL_SUFFIX, SIDECAR_SUFFIX):
        if path.endswith(suffix):
            return path[:-len(suffix)]
    return path


def save_policy(policy: PolicyArtifact, stem: str) -> str:
    """Writes ``<stem>.orlm`` and ``<stem>.json``.

    Returns:
        The sidecar path.
    """
    stem = artifact_stem(stem)
    model_path = stem + MODEL_SUFFIX
    with open(model_path, 'wb') as fh:
        fh.write(model_to_bytes(policy.q_model))
    sidecar_path = stem + SIDECAR_SUFFIX
    with open(sidecar_path, 'w', encoding='UTF-8', newline='\n') as fh:
        json.dump(_sidecar(policy, os.path.basename(model_path)), fh, indent=2)
        fh.write('\n')
    logging.debug('save_policy: %s -> %s', policy.name, sidecar_path)
    return sidecar_path


def load_policy(path: str) -> PolicyArtifact:
    """Reads an artifact written by save_policy(); ``path`` may name either file or the stem.

    Raises:
        OSError: if a file is missing.
        ShapeError: if the model blob is malformed or disagrees with the sidecar.
        ValueError: if the sidecar is malformed.
    """
    stem = artifact_stem(path)
    with open(stem + SIDECAR_SUFFIX, encoding='UTF-8') as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f'load_policy: {stem}{SIDECAR_SUFFIX}: malformed sidecar: {exc}') \
                from exc
    model_path = os.path.join(os.path.dirname(stem), meta['model_file'])
    with open(model_path, 'rb') as fh:
        model = model_from_bytes(fh.read())
    s = meta['state_spec']
    spec = StateSpaceSpec(s['name'], tuple(s['indices']), s['noise_dims'], s['noise_seed_stream'])
    rule = meta['selection_rule']
    policy = PolicyArtifact(meta['name'], model, spec, meta['reward_spec'],
                            float(rule.get('epsilon', 0.0)), meta.get('metadata', {}))
    if policy.action_count != meta['action_count']:
        raise ShapeError(f'load_policy: {stem}: model has {policy.action_count} outputs, sidecar '
                         f'says {meta["action_count"]}')
    return policy
