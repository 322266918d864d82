"""Age-of-information client scheduling for federated learning.

``policy_math`` computes and optimises the return-time variance of
age-dependent Markov selection policies, ``sched_sim`` validates them by
Monte Carlo, ``fl_sim`` runs FedAvg under any selection policy and ``cli``
wraps all of it.
"""

from .data import Dataset, PartitionSpec, generate_synthetic, load_idx, partition
from .fl_sim import FederatedClassifier, FLRunHistory, TrainConfig, run_federated
from .models import DivergenceError, SGDClassifierNP
from .policy_math import (
    MarkovPolicy,
    PolicyConfig,
    grid_search_m1,
    grid_search_optimum,
    optimal_policy,
    random_selection_stats,
    return_time_distribution,
    return_time_moments,
    stationary_distribution,
)
from .sched_sim import (
    BernoulliIID,
    InitMode,
    MarkovSelection,
    OldestAgeK,
    SimMetrics,
    UniformK,
    compare_policies,
    run_simulation,
)

__version__ = "0.1.0"

__all__ = [
    "BernoulliIID",
    "Dataset",
    "DivergenceError",
    "FLRunHistory",
    "FederatedClassifier",
    "InitMode",
    "MarkovPolicy",
    "MarkovSelection",
    "OldestAgeK",
    "PartitionSpec",
    "PolicyConfig",
    "SGDClassifierNP",
    "SimMetrics",
    "TrainConfig",
    "UniformK",
    "compare_policies",
    "generate_synthetic",
    "grid_search_m1",
    "grid_search_optimum",
    "load_idx",
    "optimal_policy",
    "partition",
    "random_selection_stats",
    "return_time_distribution",
    "return_time_moments",
    "run_federated",
    "run_simulation",
    "stationary_distribution",
]
