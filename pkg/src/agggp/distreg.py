"""Distribution regression baselines over bags of points.

Each bag is represented by its kernel mean embedding; inner products of
embeddings are exactly the aggregated kernel values

    K_ij = w_i' k(X_i, X_j) w_j

so the embedding Gram of one resolution coincides with the aggregated
Gram. Multi-resolution bags sum their per-resolution embedding Grams.

Two second-level regressors ride on top:

* linear (``fit_lre``): ridge regression directly on embeddings, with
  predictions ``k_*' (K + lambda I)^-1 y``. This equals the posterior
  mean of the exact aggregated GP with noise variance lambda, which the
  tests exploit.
* RBF (``fit_krre``): squared embedding distances ``d2_ij = K_ii - 2 K_ij
  + K_jj`` pass through ``rho_ij = exp(-d2_ij / (2 l^2))`` with unit scale;
  the lengthscale defaults to the median embedding distance over distinct
  training pairs.

Ridge systems already carry ``lambda I`` on the diagonal, so they are
factored without extra jitter. A plain linear model on concatenated bag
centroids (:func:`fit_lr_centroid`) completes the baseline set.

Assembly wall time for the Gram matrices is recorded on the fitted model
(``gram_seconds``); cross-validation reports surface it so the quadratic
cost of pairwise bag kernels can be compared against sparse training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from . import bags as bags_mod
from . import kernels
from .bags import Bag, MultiResBag, centroid_features, check_regions
from .errors import InputError
from .exact_gp import aggregated_gram_sum


def embedding_gram(spec: kernels.KernelSpec, bags_a, bags_b=None) -> np.ndarray:
    """Gram of embedding inner products for one resolution.

    Identical to :func:`agggp.bags.aggregated_gram`; named for the
    embedding reading of the same quantity.
    """
    return bags_mod.aggregated_gram(spec, bags_a, bags_b)


@dataclass
class DistRegModel:
    """Fitted embedding-ridge model (linear or RBF second level)."""

    kind: str
    kernel_specs: tuple
    ridge: float
    train_regions: list
    coeffs: np.ndarray
    second_lengthscale: float | None = None
    train_emb_diag: np.ndarray | None = None
    gram_seconds: float = 0.0

    @property
    def n_regions(self) -> int:
        return len(self.train_regions)


def _fit_common(regions, kernel_specs, ridge):
    regions, kernel_specs = check_regions(regions, kernel_specs, require_labels=True)
    if not (ridge > 0 and np.isfinite(ridge)):
        raise InputError(f"ridge must be finite and > 0, got {ridge!r}")
    y = np.array([r.label for r in regions], dtype=np.float64)
    return regions, kernel_specs, y


def fit_lre(regions, kernel_specs, ridge: float = 0.1) -> DistRegModel:
    """Linear second-level embedding regression (ridge ``lambda``)."""
    regions, kernel_specs, y = _fit_common(regions, kernel_specs, ridge)
    t0 = time.perf_counter()
    K = aggregated_gram_sum(kernel_specs, regions)
    gram_seconds = time.perf_counter() - t0
    A = K
    A.flat[:: A.shape[0] + 1] += ridge
    chol = kernels.chol_lower(A, context="embedding Gram plus ridge")
    coeffs = cho_solve((chol, True), y)
    return DistRegModel(kind="lre", kernel_specs=kernel_specs, ridge=float(ridge),
                        train_regions=regions, coeffs=coeffs,
                        gram_seconds=gram_seconds)


def fit_krre(regions, kernel_specs, ridge: float = 0.1,
             second_lengthscale: float | None = None) -> DistRegModel:
    """RBF second-level embedding regression.

    The second-level lengthscale defaults to the median embedding distance
    over distinct training pairs; with a single training bag it must be
    given explicitly.
    """
    regions, kernel_specs, y = _fit_common(regions, kernel_specs, ridge)
    t0 = time.perf_counter()
    K = aggregated_gram_sum(kernel_specs, regions)
    diag = np.diag(K).copy()
    d2 = np.maximum(diag[:, None] - 2.0 * K + diag[None, :], 0.0)
    if second_lengthscale is None:
        n = len(regions)
        if n < 2:
            raise InputError(
                "median heuristic for the second level needs at least two bags; "
                "pass second_lengthscale explicitly"
            )
        iu = np.triu_indices(n, k=1)
        med = float(np.median(np.sqrt(d2[iu])))
        if med <= 0.0:
            raise InputError(
                "median embedding distance is zero; pass second_lengthscale explicitly"
            )
        second_lengthscale = med
    elif not (second_lengthscale > 0 and np.isfinite(second_lengthscale)):
        raise InputError(
            f"second_lengthscale must be finite and > 0, got {second_lengthscale!r}"
        )
    R = np.exp(d2 * (-0.5 / second_lengthscale**2))
    gram_seconds = time.perf_counter() - t0
    R.flat[:: R.shape[0] + 1] += ridge
    chol = kernels.chol_lower(R, context="second-level Gram plus ridge")
    coeffs = cho_solve((chol, True), y)
    return DistRegModel(kind="krre", kernel_specs=kernel_specs, ridge=float(ridge),
                        train_regions=regions, coeffs=coeffs,
                        second_lengthscale=float(second_lengthscale),
                        train_emb_diag=diag, gram_seconds=gram_seconds)


def predict_many(model: DistRegModel, regions) -> np.ndarray:
    """Predicted labels for a sequence of regions."""
    regions, _ = check_regions(regions, model.kernel_specs)
    Kx = aggregated_gram_sum(model.kernel_specs, regions, model.train_regions)
    if model.kind == "lre":
        return Kx @ model.coeffs
    kss = np.array([
        float(aggregated_gram_sum(model.kernel_specs, [r])[0, 0]) for r in regions
    ])
    d2 = np.maximum(kss[:, None] - 2.0 * Kx + model.train_emb_diag[None, :], 0.0)
    rho = np.exp(d2 * (-0.5 / model.second_lengthscale**2))
    return rho @ model.coeffs


def predict(model: DistRegModel, region: MultiResBag) -> float:
    """Predicted label for one region."""
    return float(predict_many(model, [region])[0])


@dataclass
class LinearCentroidModel:
    """Ordinary least squares on concatenated bag centroids."""

    coef: np.ndarray
    intercept: float
    add_intercept: bool


def _centroid_row(region: MultiResBag) -> np.ndarray:
    return np.concatenate([centroid_features(b) for b in region.resolutions])


def fit_lr_centroid(regions, add_intercept: bool = True) -> LinearCentroidModel:
    """Least-squares linear regression on per-region centroid features.

    Uses the minimum-norm solution, so collinear features are tolerated.
    """
    regions, _ = check_regions(regions, None, require_labels=True)
    X = np.array([_centroid_row(r) for r in regions])
    y = np.array([r.label for r in regions], dtype=np.float64)
    if add_intercept:
        X = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    if add_intercept:
        return LinearCentroidModel(coef=beta[:-1], intercept=float(beta[-1]),
                                   add_intercept=True)
    return LinearCentroidModel(coef=beta, intercept=0.0, add_intercept=False)


def predict_lr(model: LinearCentroidModel, region: MultiResBag) -> float:
    row = _centroid_row(region)
    if row.shape != model.coef.shape:
        raise InputError(
            f"region {region.region_id!r} centroid features have shape {row.shape}, "
            f"model expects {model.coef.shape}"
        )
    return float(row @ model.coef + model.intercept)


def predict_lr_many(model: LinearCentroidModel, regions) -> np.ndarray:
    return np.array([predict_lr(model, r) for r in regions])
