"""Continuous-time Bayesian network inference with a variable-time-scope
cluster graph, expectation propagation, and adaptive message
repartitioning, plus an exact oracle and a trajectory sampler."""

from .errors import (CtbnError, DegenerateStateError, FamilyPreservationError,
                     IntegrationError, ModelValidationError, OracleInfeasibleError,
                     ScopeCollisionError, ZeroProbabilityError, ZeroSupportError)
from .model import (ConditionalIntensityMatrix, CtbnModel, DynamicsMatrix,
                    InitialDistribution, InitialFactor, IntensityMatrix,
                    IntervalEvidence, SufficientStats, Variable, amalgamate,
                    marginal_stats, point_mass_initial, reduce_matrix, reduce_point)
from .markov import (IntervalProcess, RkConfig, StepRecord, expected_stats,
                     expm_action, expm_action_T, point_posterior,
                     project_homogeneous)
from .exact import JointProcess, build_joint, exact_loglik, exact_marginal, \
    exact_marginals
from .clustergraph import (Cluster, ClusterGraph, Sepset, build_uniform_graph,
                           initialize, insert_demarcation, validate)
from .ep import (EpDiagnostics, Schedule, largest_valid_lambda, run_ep,
                 send_horizontal, send_vertical, update_dist)
from .split import (SplitCandidate, SplitPolicy, best_split_candidate,
                    choose_split, execute_split, kl_cost, stats_inner)
from .sampler import Trajectory, evidence_from_trajectory, sample_trajectory
from .experiments import (ExperimentConfig, ExperimentResult, gen_chain,
                          gen_rate_ratio_series, pair_partition, run_experiment,
                          staggered_state, uniform_cuts)

__version__ = "0.1.0"
