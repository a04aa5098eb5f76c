"""Exact bisimulation metrics on finite MDPs and bisimulation-based representation learning."""

from .agent import DBCAgent
from .bisim import (
    BisimulationMetric,
    BisimulationPartition,
    EpsilonAggregation,
    PseudoMetric,
    bisim_metric_max,
    bisim_metric_onpolicy,
    bisimulation_partition,
    check_lipschitz,
    check_value_bound,
    epsilon_aggregate,
    pi_star_bisim_metric,
)
from .config import ConfigError, ExperimentConfig, load_config
from .envs import (
    ContinuousPointMass,
    FactoredCausalMdp,
    MdpFileEnv,
    TabularDistractorGrid,
    make_env,
    reward_variant,
    to_finite_mdp,
)
from .mdp import DiscretePolicy, FiniteMdp, random_mdp, value_iteration
from .ot import brute_force_w1, w1_discrete, w2_diag_gaussian
from .validation import ConvergenceError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "BisimulationMetric",
    "BisimulationPartition",
    "ConfigError",
    "ContinuousPointMass",
    "ConvergenceError",
    "DBCAgent",
    "DiscretePolicy",
    "EpsilonAggregation",
    "ExperimentConfig",
    "FactoredCausalMdp",
    "FiniteMdp",
    "MdpFileEnv",
    "NumericalError",
    "PseudoMetric",
    "TabularDistractorGrid",
    "bisim_metric_max",
    "bisim_metric_onpolicy",
    "bisimulation_partition",
    "brute_force_w1",
    "check_lipschitz",
    "check_value_bound",
    "epsilon_aggregate",
    "load_config",
    "make_env",
    "pi_star_bisim_metric",
    "random_mdp",
    "reward_variant",
    "to_finite_mdp",
    "value_iteration",
    "w1_discrete",
    "w2_diag_gaussian",
]
