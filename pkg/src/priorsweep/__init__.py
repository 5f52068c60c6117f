"""Bayes-factor and posterior-expectation surfaces over a prior
hyperparameter space, estimated from MCMC runs at a small skeleton of
hyperparameter values."""

__version__ = "0.1.0"

from .blvs import BlvsFamily, Dataset, ModelEnumeration, ModelState, ingest_csv
from .families import ChainSpec, ConjugateToy, DensityFamily, FunctionOfTheta, toy_function
from .ratio import (LogWeightMatrix, RatioEstimate, build_log_weight_matrix,
                    estimate_d, estimate_ratios, estimate_sigma)
from .surface import (Stage2Workspace, SurfaceRecord, attach_standard_errors,
                      bf_cv_hat, bf_gradient_hat, bf_hat, pe_hat,
                      prepare_workspace, surface)
from .variance import (PlanInputs, SpectralConfig, StagePlan, VarianceBreakdown,
                       assemble_variance, c_hat, gamma_rho_hat, lrv_matrix,
                       q_opt, sigma_sq_hat, spectral_lrv, tau_sq_hat, v_hat,
                       variance_surface, w_hat)

__all__ = [
    "BlvsFamily", "Dataset", "ModelEnumeration", "ModelState", "ingest_csv",
    "ChainSpec", "ConjugateToy", "DensityFamily", "FunctionOfTheta", "toy_function",
    "LogWeightMatrix", "RatioEstimate", "build_log_weight_matrix",
    "estimate_d", "estimate_ratios", "estimate_sigma",
    "Stage2Workspace", "SurfaceRecord", "attach_standard_errors",
    "bf_cv_hat", "bf_gradient_hat", "bf_hat", "pe_hat", "prepare_workspace",
    "surface",
    "PlanInputs", "SpectralConfig", "StagePlan", "VarianceBreakdown",
    "assemble_variance", "c_hat", "gamma_rho_hat", "lrv_matrix", "q_opt",
    "sigma_sq_hat", "spectral_lrv", "tau_sq_hat", "v_hat", "variance_surface",
    "w_hat",
]
