"""Multi-fidelity hybrid offline-online RL with information-gain fidelity selection,
on tabular MDP families."""

from .config import ExperimentConfig, load_config, save_config
from .ensemble import CqlConfig, EnsembleMember, train_cql, train_ensemble
from .envs import gridworld
from .experiment import RunResult, run, run_baseline, run_mf_hrl_igm, run_sweep
from .fidelity import BudgetLedger, FidelityFamily, build_family, generate_offline, kl_gap
from .hybrid import RatioConfig, discriminator_ratio, exact_ratio, h2o_loss, h2o_update
from .mdp import Batch, TabularMdp, expected_return, rollout, value_iteration
from .regret import LsviConfig, lsvi_ucb, multi_fidelity_regret, sublinearity_fit
from .selector import (PosteriorBelief, SelectorConfig, information_gain, posterior_update,
                       select_fidelity)

__version__ = "0.1.0"

__all__ = [
    "Batch", "BudgetLedger", "CqlConfig", "EnsembleMember", "ExperimentConfig",
    "FidelityFamily", "LsviConfig", "PosteriorBelief", "RatioConfig", "RunResult",
    "SelectorConfig", "TabularMdp", "build_family", "discriminator_ratio", "exact_ratio",
    "expected_return", "generate_offline", "gridworld", "h2o_loss", "h2o_update",
    "information_gain", "kl_gap", "load_config", "lsvi_ucb", "multi_fidelity_regret",
    "posterior_update", "rollout", "run", "run_baseline", "run_mf_hrl_igm", "run_sweep",
    "save_config", "select_fidelity", "sublinearity_fit", "train_cql", "train_ensemble",
    "value_iteration",
]
