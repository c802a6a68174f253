"""Population-based coarse-correlated-equilibrium solvers for small
extensive-form games: an exact iterated best-response loop with gap
certification, plus a continual-learning population variant sharing one
conditional policy across strategies."""

__version__ = "0.1.0"

from .best_response import (BestResponseResult, CoPlayerMixture, cce_gap,
                            deviation_gain, exact_maxent_best_response,
                            mixture_from_marginal, point_mass_mixture)
from .cce_solver import (JointDistribution, SolverNumericalError, marginal,
                         restricted_gap, solve_cce)
from .driver import (IterationRecord, RunConfig, RunResult, evaluate_trace,
                     initial_policies, jpsro_run, prefix_snapshots)
from .games import (ExtensiveGame, GameSpec, GameValidationError,
                    UnknownGameError, build_game, enumerate_infosets,
                    parse_game_spec)
from .metagame import (PayoffTensor, TensorCapError, evaluate_payoff_tensor,
                       exact_expected_payoff)
from .neupl import (EmbeddingSets, PayoffEstimator, PopulationModel,
                    counterexample_demo, encode_coplayers, estimate_payoffs,
                    neupl_jpsro_run, pr_br, train_estimator, train_iteration)
from .policies import (JointPolicyProfile, SupportMismatchError, TabularPolicy,
                       deterministic_policy_count_bound, deserialize_policy,
                       kl_divergence, policy_from_table,
                       random_deterministic_policy, serialize_policy,
                       uniform_policy)
