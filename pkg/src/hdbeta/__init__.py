"""Bayesian hierarchical dynamic beta regression for panels of bounded scores."""

__version__ = "0.1.0"

from .data import ObservationTable, PanelError, PanelIndex, RawScoreTable, build_table, covariate_standardize, read_panel_csv
from .model import ModelSpec, ParameterState, PriorSpec, beta_logpdf, log_likelihood, log_prior
from .mcmc import ChainOutput, SamplerConfig, run_chain, run_chains
from .selection import ScoreReport, comparison_table, dic, logs, replicate, rps, score_model
from .simulate import SimulationScenario, simulate_panel
from .standardize import standardize_scores

__all__ = [
    "ChainOutput",
    "ModelSpec",
    "ObservationTable",
    "PanelError",
    "PanelIndex",
    "ParameterState",
    "PriorSpec",
    "RawScoreTable",
    "SamplerConfig",
    "ScoreReport",
    "SimulationScenario",
    "beta_logpdf",
    "build_table",
    "comparison_table",
    "covariate_standardize",
    "dic",
    "log_likelihood",
    "log_prior",
    "logs",
    "read_panel_csv",
    "replicate",
    "rps",
    "run_chain",
    "run_chains",
    "score_model",
    "simulate_panel",
    "standardize_scores",
]
