"""OPESelect picks the state representation and the reward function of an offline reinforcement
learning agent using off-policy evaluation (OPE) alone. Candidates are never tried in the live
environment during selection: every decision is made from one logged dataset.

Quick Start
-----------

Example: collect a lander dataset, then rank the default candidate state spaces.

.. code-block:: python

    from opeselect import (CqlConfig, DdqnConfig, DEFAULT_STATE_SPACES, FqeConfig, REWARD_F,
                           collect_run, offline_only, select_state_space)

    # Train a DDQN agent for 300 episodes, logging every step with its propensity
    result = collect_run(DdqnConfig(episodes=300), seed=0)

    # Everything below works from the logged data only
    with offline_only():
        report = select_state_space(DEFAULT_STATE_SPACES, result.dataset, REWARD_F,
                                    CqlConfig(), FqeConfig(), seed=0)
    print(report.winner)

The same pipeline is available from the command line:

.. code-block:: text

    opeselect collect --config experiment.toml --seed 0
    opeselect select-state --config experiment.toml --seed 0 \\
        --dataset runs/<hash>/0/dataset.orl.jsonl.gz

About the Pipeline
------------------

1. **Collection.** A double-DQN agent learns to land while every interaction is logged with the
   full union state vector, all reward components and the exact probability of the logged
   action. Checkpoints of the agent (untrained, mid-training, best) give behavior policies of
   known relative quality.

2. **Offline training.** For each candidate state space (a projection of the union vector,
   possibly with extra noise features) a conservative Q-learning agent is trained from the
   dataset.

3. **Evaluation.** Importance sampling, weighted importance sampling, the fitted-Q direct method
   and the doubly robust estimator score any policy from the dataset. The fitted-Q evaluator reads
   the union state vector.

4. **Selection.** State spaces are ranked by the direct-method value of the policy trained on
   them. Reward functions are ranked by how well they separate the value distributions of a
   good and a bad policy: mean difference, KL and Jensen-Shannon divergence of the standardized
   distributions.

Tabular MDPs with exact solutions (:mod:`opeselect.tabular`) render into the same dataset format
and serve as ground truth for the estimators.
"""
from opeselect.datastore import (Dataset, DatasetError, EpisodeLog, Transition, read_dataset,
                                 validate_dataset, write_dataset)
from opeselect.env import (DEFAULT_REWARDS, DEFAULT_STATE_SPACES, REWARD_F, LanderConfig,
                           LanderEnv, RewardSpec, StateSpaceSpec, offline_only)
from opeselect.funcapprox import MlpModel, ShapeError
from opeselect.offline_cql import CqlConfig, train_cql
from opeselect.online_collect import DdqnConfig, audit_policy, collect_run
from opeselect.ope import (DegenerateEstimateError, FqeConfig, OPEReport, estimate_dm_fqe,
                           estimate_dr, estimate_is, fit_fqe)
from opeselect.policy import PolicyArtifact, load_policy, save_policy
from opeselect.selection import select_reward, select_state_space

__version__ = "0.1"
