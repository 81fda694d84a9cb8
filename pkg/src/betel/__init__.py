"""Bayesian exponentially tilted empirical likelihood for conditional moment models."""
from .basis import BasisMatrix, BasisSpec, ColumnPlan, build_basis, k_rule
from .data import Dataset, ingest_csv
from .etel import EtelEvaluation, HullCertificate, evaluate, hull_check, log_etel_at, solve_tilting
from .marglik import (MarginalLikelihood, MlConfig, ModelComparison, VolumeEstimate, compare_models, hull_volume,
                      marginal_likelihood, posterior_ordinate, sparsity_search)
from .model import MomentModel, iv_model, linear_regression_model
from .posterior import LogPosterior, McmcConfig, McmcOutput, StudentTPrior, run_mcmc, run_one_block, run_tarb

__version__ = "0.1.0"

__all__ = [
    "BasisMatrix", "BasisSpec", "ColumnPlan", "build_basis", "k_rule",
    "Dataset", "ingest_csv",
    "EtelEvaluation", "HullCertificate", "evaluate", "hull_check", "log_etel_at", "solve_tilting",
    "MarginalLikelihood", "MlConfig", "ModelComparison", "VolumeEstimate", "compare_models", "hull_volume",
    "marginal_likelihood", "posterior_ordinate", "sparsity_search",
    "MomentModel", "iv_model", "linear_regression_model",
    "LogPosterior", "McmcConfig", "McmcOutput", "StudentTPrior", "run_mcmc", "run_one_block", "run_tarb",
]
