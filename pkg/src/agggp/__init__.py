"""Gaussian process regression for aggregated outputs.

Labels live on regions; covariates live on per-region weighted point sets
("bags"), possibly at a different resolution per covariate source. The
package provides an exact GP on aggregated kernels, a scalable variational
model with per-resolution inducing points, embedding-ridge baselines, a
synthetic data generator with known ground truth, and a cross-validation
harness. ``agggp`` on the command line drives the same pieces.
"""

from .bags import (
    Bag,
    Dataset,
    MultiResBag,
    aggregated_gram,
    aggregated_gram_diag,
    load_dataset,
    normalize_weights,
    write_dataset,
)
from .distreg import fit_krre, fit_lr_centroid, fit_lre
from .errors import AggGPError, InputError, NumericalError, ResourceError
from .exact_gp import ExactAggGP, log_marginal_likelihood
from .harness import METHODS, CVReport, coverage, format_table, kfold, mape, rmse, run_cv
from .kernels import KernelSpec, median_heuristic
from .optim import check_gradients, elbo_grad, train
from .synth import ResolutionConfig, SynthConfig, generate
from .variational import (
    GaussianPrediction,
    MVBAggModel,
    VariationalState,
    disaggregate,
    elbo,
    initialize_model,
    load_model,
    predict_bag,
    q_posterior_at,
    save_model,
)

__version__ = "0.1.0"

__all__ = [
    "AggGPError",
    "Bag",
    "CVReport",
    "METHODS",
    "Dataset",
    "ExactAggGP",
    "GaussianPrediction",
    "InputError",
    "KernelSpec",
    "MVBAggModel",
    "MultiResBag",
    "NumericalError",
    "ResolutionConfig",
    "ResourceError",
    "SynthConfig",
    "VariationalState",
    "aggregated_gram",
    "aggregated_gram_diag",
    "check_gradients",
    "coverage",
    "disaggregate",
    "elbo",
    "elbo_grad",
    "fit_krre",
    "fit_lr_centroid",
    "fit_lre",
    "format_table",
    "generate",
    "initialize_model",
    "kfold",
    "load_dataset",
    "load_model",
    "log_marginal_likelihood",
    "mape",
    "median_heuristic",
    "normalize_weights",
    "predict_bag",
    "q_posterior_at",
    "rmse",
    "run_cv",
    "save_model",
    "train",
    "write_dataset",
]
