"""Exact Gaussian process regression on aggregated outputs.

Each region contributes one observation ``y_i = sum_l w_il' f_l(X_il) + eps_i``
with independent zero-mean GP priors on the per-resolution functions
``f_l``. Integrating the latents out exactly gives a plain GP over region
labels whose covariance is the sum of per-resolution aggregated Grams::

    K_ij = sum_l  w_il' k_l(X_il, X_jl) w_jl

Fitting is a single Cholesky factorization of ``K + sigma^2 I``; no jitter
is added because the noise term already regularizes the diagonal. Cost is
quadratic in the total number of points per resolution, so :func:`fit`
refuses instances whose Gram assembly would exceed a cell budget. This
model doubles as standard GP regression when every bag holds one point,
and it is the small-instance ground truth the variational model is tested
against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import bags as bags_mod
from . import kernels
from .errors import InputError, ResourceError
from .variational import GaussianPrediction, clipped_variance

DEFAULT_CELL_BUDGET = 4e8

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ExactAggGP:
    """Fitted exact model: training bags plus factorization products."""

    kernel_specs: tuple
    noise_var: float
    train_regions: list
    chol: np.ndarray
    alpha: np.ndarray
    y: np.ndarray

    @property
    def n_regions(self) -> int:
        return len(self.train_regions)


def aggregated_gram_sum(kernel_specs, regions_a, regions_b=None) -> np.ndarray:
    """Sum over resolutions of the aggregated Gram matrices."""
    out = None
    for l, spec in enumerate(kernel_specs):
        ba = bags_mod.bags_at_resolution(regions_a, l)
        bb = None if regions_b is None else bags_mod.bags_at_resolution(regions_b, l)
        g = bags_mod.aggregated_gram(spec, ba, bb)
        out = g if out is None else out + g
    return out


def fit(regions, kernel_specs, noise_var: float,
        cell_budget: float = DEFAULT_CELL_BUDGET) -> ExactAggGP:
    """Fit the exact aggregated GP.

    Parameters
    ----------
    regions : sequence of MultiResBag
        All regions must carry labels.
    kernel_specs : sequence of KernelSpec
        One per resolution.
    noise_var : float
        Observation noise variance, strictly positive.
    cell_budget : float
        Upper bound on ``sum_l (total points at resolution l)^2``, the
        number of kernel evaluations the Gram assembly needs. Exceeding it
        raises :class:`ResourceError` instead of thrashing memory.
    """
    regions, kernel_specs = bags_mod.check_regions(regions, kernel_specs, require_labels=True)
    if not (noise_var > 0 and math.isfinite(noise_var)):
        raise InputError(f"noise_var must be finite and > 0, got {noise_var!r}")
    cells = 0
    for l in range(len(kernel_specs)):
        total = sum(r.resolutions[l].n_points for r in regions)
        cells += total * total
    if cells > cell_budget:
        raise ResourceError(
            f"exact fit needs {cells:.3g} kernel evaluations, over the budget "
            f"{cell_budget:.3g}; use the variational model or raise cell_budget"
        )
    K = aggregated_gram_sum(kernel_specs, regions)
    K.flat[:: K.shape[0] + 1] += noise_var
    chol = kernels.chol_lower(K, context="aggregated covariance plus noise")
    y = np.array([r.label for r in regions], dtype=np.float64)
    alpha = cho_solve((chol, True), y)
    return ExactAggGP(
        kernel_specs=kernel_specs,
        noise_var=float(noise_var),
        train_regions=regions,
        chol=chol,
        alpha=alpha,
        y=y,
    )


def predict_aggregate(model: ExactAggGP, region) -> GaussianPrediction:
    """Posterior of the *latent* aggregate for a new region.

    Returns the mean and variance of ``sum_l w' f_l`` given the training
    labels. Add ``model.noise_var`` to the variance for intervals on the
    observed label.
    """
    return predict_many(model, [region])[0]


def predict_many(model: ExactAggGP, regions) -> list:
    """Batched :func:`predict_aggregate` sharing one cross-Gram."""
    regions, _ = bags_mod.check_regions(regions, model.kernel_specs)
    Kx = aggregated_gram_sum(model.kernel_specs, regions, model.train_regions)
    means = Kx @ model.alpha
    T = solve_triangular(model.chol, Kx.T, lower=True)
    kss = np.zeros(len(regions))
    for l, spec in enumerate(model.kernel_specs):
        kss += bags_mod.aggregated_gram_diag(
            spec, bags_mod.bags_at_resolution(regions, l))
    out = []
    for i, r in enumerate(regions):
        var = clipped_variance(kss[i] - float(T[:, i] @ T[:, i]),
                               context=f"aggregate prediction for {r.region_id!r}")
        out.append(GaussianPrediction(mean=float(means[i]), variance=var))
    return out


def log_marginal_likelihood(model: ExactAggGP) -> float:
    """Log evidence of the training labels under the exact model."""
    n = model.n_regions
    logdet_half = float(np.sum(np.log(np.diag(model.chol))))
    return float(-0.5 * model.y @ model.alpha - logdet_half - 0.5 * n * _LOG_2PI)
