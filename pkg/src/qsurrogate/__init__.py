"""Quantile-network surrogates for two-stage stochastic mixed-integer programs."""

from .datagen import Dataset, generate, load_dataset, save_dataset
from .embed import EmbeddedSurrogate, SurrogateSpec, build_surrogate, propagate_bounds
from .milp import MipModel, SolveLimits, Status, solve
from .problems import CFLP, InvestmentProblem, ScenarioSet, TwoStageProblem, make_problem
from .qnn import QuantileNetwork, TrainConfig, load_network, save_network, train
from .saa import RiskSpec, build_saa, empirical_cvar, evaluate_fixed_x, solve_saa

__version__ = "0.1.0"

__all__ = [
    "CFLP", "Dataset", "EmbeddedSurrogate", "InvestmentProblem", "MipModel", "QuantileNetwork",
    "RiskSpec", "ScenarioSet", "SolveLimits", "Status", "SurrogateSpec", "TrainConfig",
    "TwoStageProblem", "build_saa", "build_surrogate", "empirical_cvar", "evaluate_fixed_x",
    "generate", "load_dataset", "load_network", "make_problem", "propagate_bounds", "save_dataset",
    "save_network", "solve", "solve_saa", "train",
]
