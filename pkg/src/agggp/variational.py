"""Sparse variational Gaussian processes over aggregated outputs.

One independent GP ``f_l`` per covariate resolution, each approximated
through inducing points ``Z_l`` with a free Gaussian ``q(u_l) = N(eta_l,
Sigma_l)`` over the inducing values. The region label is modeled as

    y_i = sum_l w_il' f_l(X_il) + eps_i,   eps_i ~ N(0, s_i * sigma^2)

with ``s_i = 1`` in the default ``"plain"`` noise mode and
``s_i = sum_l sum_j w_ilj^2`` in the ``"weighted"`` mode.

The inducing prior is defined as ``N(0, K_zz + jitter I)`` with the
package-wide relative jitter, which keeps every Cholesky well posed and
the evidence lower bound rigorous (it corresponds to observing the
inducing values through a tiny iid perturbation). Under ``q``, the
aggregate of resolution ``l`` in bag ``i`` is Gaussian with

    mean_il = w' A eta,        A = k(X, Z) (K_zz + jI)^-1
    var_il  = w' (k_XX - A (K_zz + jI - Sigma) A') w

and the bound over a minibatch B of the n total regions is

    ELBO = (n / |B|) * sum_{i in B} E_i  -  sum_l KL(q(u_l) || p(u_l))
    E_i  = -((y_i - mu_i)^2 + v_i) / (2 s_i sigma^2)
           - log(2 pi s_i sigma^2) / 2

where ``mu_i`` sums the per-resolution means (so its square carries the
cross-resolution products) and ``v_i`` sums the per-resolution variances.
This module holds the model state, the readable reference implementation
of the bound, predictions, and serialization; :mod:`agggp.optim` carries
the matching analytic gradients and the training loop.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import bags as bags_mod
from . import kernels
from .bags import Bag, Dataset, MultiResBag
from .errors import InputError, NumericalError
from .ioutil import atomic_write_text

_LOG_2PI = math.log(2.0 * math.pi)

# |negative variance| up to this is rounding noise: clip to zero and warn.
VARIANCE_TOL = 1e-8

# Resolution names treated as spatial coordinates when kernel families
# are not given explicitly.
SPATIAL_NAMES = ("space", "spatial")


@dataclass(frozen=True)
class GaussianPrediction:
    """Scalar Gaussian predictive distribution."""

    mean: float
    variance: float


def clipped_variance(value: float, context: str = "prediction") -> float:
    """Clamp tiny negative variances to zero; reject real negatives."""
    v = float(value)
    if v >= 0.0:
        return v
    if v >= -VARIANCE_TOL:
        warnings.warn(
            f"clipped negative variance {v:.3e} to 0 for {context}",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    raise NumericalError(f"negative predictive variance {v:.6e} for {context}")


@dataclass
class VariationalState:
    """Per-resolution inducing inputs and Gaussian variational parameters.

    ``inducing[l]`` has shape (L_l, d_l), ``mean[l]`` shape (L_l,), and
    ``cov_factor[l]`` is the lower-triangular Cholesky factor of the
    variational covariance (strictly positive diagonal).
    """

    inducing: list
    mean: list
    cov_factor: list

    def __post_init__(self):
        if not (len(self.inducing) == len(self.mean) == len(self.cov_factor)):
            raise InputError("state lists must have one entry per resolution")
        if not self.inducing:
            raise InputError("state needs at least one resolution")
        Zs, ms, Cs = [], [], []
        for l, (Z, m, C) in enumerate(zip(self.inducing, self.mean, self.cov_factor)):
            Z = np.asarray(Z, dtype=np.float64)
            m = np.asarray(m, dtype=np.float64)
            C = np.asarray(C, dtype=np.float64)
            if Z.ndim != 2 or Z.shape[0] < 1:
                raise InputError(f"resolution {l}: inducing must be (L, d) with L >= 1")
            L = Z.shape[0]
            if m.shape != (L,):
                raise InputError(f"resolution {l}: mean shape {m.shape}, expected ({L},)")
            if C.shape != (L, L):
                raise InputError(f"resolution {l}: cov_factor shape {C.shape}, expected ({L},{L})")
            if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(m))
                    and np.all(np.isfinite(C))):
                raise InputError(f"resolution {l}: non-finite state values")
            if np.any(np.triu(C, k=1) != 0.0):
                raise InputError(f"resolution {l}: cov_factor must be lower triangular")
            if np.any(np.diag(C) <= 0.0):
                raise InputError(f"resolution {l}: cov_factor diagonal must be positive")
            Zs.append(Z)
            ms.append(m)
            Cs.append(C)
        self.inducing, self.mean, self.cov_factor = Zs, ms, Cs

    @property
    def n_resolutions(self) -> int:
        return len(self.inducing)

    def sizes(self) -> tuple:
        return tuple(Z.shape[0] for Z in self.inducing)

    def copy(self) -> "VariationalState":
        return VariationalState(
            inducing=[Z.copy() for Z in self.inducing],
            mean=[m.copy() for m in self.mean],
            cov_factor=[C.copy() for C in self.cov_factor],
        )


@dataclass
class MVBAggModel:
    """Multi-resolution variational aggregated-output GP."""

    resolution_names: list
    kernel_specs: list
    state: VariationalState
    noise_var: float
    noise_mode: str = "plain"
    trainable_inducing: bool = False

    def __post_init__(self):
        names = [str(n) for n in self.resolution_names]
        if len(names) != self.state.n_resolutions or len(self.kernel_specs) != len(names):
            raise InputError("resolution names, kernels, and state must align")
        if self.noise_mode not in ("plain", "weighted"):
            raise InputError(f"unknown noise_mode {self.noise_mode!r}")
        if not (self.noise_var > 0 and math.isfinite(self.noise_var)):
            raise InputError(f"noise_var must be finite and > 0, got {self.noise_var!r}")
        for l, (spec, Z) in enumerate(zip(self.kernel_specs, self.state.inducing)):
            if Z.shape[1] != spec.input_dim:
                raise InputError(
                    f"resolution {l}: inducing dimension {Z.shape[1]} does not "
                    f"match kernel input_dim {spec.input_dim}"
                )
        self.resolution_names = tuple(names)
        self.kernel_specs = tuple(self.kernel_specs)
        self.noise_var = float(self.noise_var)

    @property
    def n_resolutions(self) -> int:
        return len(self.resolution_names)

    def copy(self) -> "MVBAggModel":
        return MVBAggModel(
            resolution_names=list(self.resolution_names),
            kernel_specs=list(self.kernel_specs),
            state=self.state.copy(),
            noise_var=self.noise_var,
            noise_mode=self.noise_mode,
            trainable_inducing=self.trainable_inducing,
        )

    def resolution_index(self, name) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= int(name) < self.n_resolutions:
                raise InputError(f"resolution index {name} out of range")
            return int(name)
        try:
            return self.resolution_names.index(str(name))
        except ValueError:
            raise InputError(
                f"unknown resolution {name!r}; model has {self.resolution_names}"
            ) from None


def _prior_chol(spec, Z) -> np.ndarray:
    K = kernels.add_jitter(kernels.gram(spec, Z), spec.scale)
    return kernels.chol_lower(K, context="inducing Gram")


def bag_noise_factor(region: MultiResBag, noise_mode: str) -> float:
    """Multiplier on sigma^2 for one region's observation noise."""
    if noise_mode == "plain":
        return 1.0
    return float(sum(float(b.weights @ b.weights) for b in region.resolutions))


def kl_term(state: VariationalState, kernel_specs) -> float:
    """Sum over resolutions of KL(q(u_l) || N(0, K_zz + jitter I))."""
    total = 0.0
    for spec, Z, eta, C in zip(kernel_specs, state.inducing, state.mean,
                               state.cov_factor):
        Lk = _prior_chol(spec, Z)
        L = Z.shape[0]
        S = solve_triangular(Lk, C, lower=True)
        trace = float(np.sum(S * S))
        u = solve_triangular(Lk, eta, lower=True)
        quad = float(u @ u)
        logdet_prior = 2.0 * float(np.sum(np.log(np.diag(Lk))))
        logdet_q = 2.0 * float(np.sum(np.log(np.diag(C))))
        total += 0.5 * (trace + quad - L + logdet_prior - logdet_q)
    return total


def q_posterior_at(model: MVBAggModel, resolution, Xq):
    """Marginal of ``f_l`` at query points under the variational posterior.

    Parameters
    ----------
    resolution : int or str
    Xq : ndarray, shape (m, d_l)

    Returns
    -------
    (mean, cov) : ndarray (m,) and ndarray (m, m)
    """
    l = model.resolution_index(resolution)
    spec = model.kernel_specs[l]
    Z = model.state.inducing[l]
    eta = model.state.mean[l]
    C = model.state.cov_factor[l]
    Lk = _prior_chol(spec, Z)
    Kxz = kernels.gram(spec, np.asarray(Xq, dtype=np.float64), Z)
    A = cho_solve((Lk, True), Kxz.T).T
    mean = A @ eta
    V = solve_triangular(Lk, Kxz.T, lower=True)
    AC = A @ C
    cov = kernels.gram(spec, np.asarray(Xq, dtype=np.float64)) - V.T @ V + AC @ AC.T
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def _bag_moments(model: MVBAggModel, region: MultiResBag):
    """Posterior mean and variance of the aggregate ``sum_l w' f_l``."""
    if region.n_resolutions != model.n_resolutions:
        raise InputError(
            f"region {region.region_id!r} has {region.n_resolutions} resolutions, "
            f"model expects {model.n_resolutions}"
        )
    mu = 0.0
    var = 0.0
    for l, bag in enumerate(region.resolutions):
        m, cov = q_posterior_at(model, l, bag.points)
        w = bag.weights
        mu += float(w @ m)
        var += float(w @ cov @ w)
    return mu, var


def elbo(model: MVBAggModel, regions, n_total: int) -> float:
    """Minibatch evidence lower bound (readable reference path).

    ``regions`` is the batch (labels required); ``n_total`` is the size of
    the full training set the batch was drawn from. With the full set as
    the batch this is the exact bound; :mod:`agggp.optim` computes the same
    value with gradients.
    """
    regions = list(regions)
    if not regions:
        raise InputError("elbo needs a non-empty batch")
    if n_total < len(regions):
        raise InputError(f"n_total={n_total} smaller than the batch ({len(regions)})")
    total = 0.0
    for r in regions:
        if r.label is None:
            raise InputError(f"region {r.region_id!r} has no label")
        mu, var = _bag_moments(model, r)
        nv = bag_noise_factor(r, model.noise_mode) * model.noise_var
        resid = r.label - mu
        total += -0.5 * (resid * resid + var) / nv - 0.5 * math.log(2.0 * math.pi * nv)
    return (n_total / len(regions)) * total - kl_term(model.state, model.kernel_specs)


def predict_bag(model: MVBAggModel, region: MultiResBag,
                include_noise: bool = True) -> GaussianPrediction:
    """Predictive distribution of a region's label (or latent aggregate).

    With ``include_noise`` the observation noise ``s_i sigma^2`` (mode
    dependent) is added to the aggregate's posterior variance.
    """
    mu, var = _bag_moments(model, region)
    if include_noise:
        var = var + bag_noise_factor(region, model.noise_mode) * model.noise_var
    return GaussianPrediction(
        mean=mu,
        variance=clipped_variance(var, context=f"bag {region.region_id!r}"),
    )


def disaggregate(model: MVBAggModel, resolution, Xq) -> list:
    """Pointwise posterior of one resolution's latent at query points.

    Returns one :class:`GaussianPrediction` per row of ``Xq`` (marginal
    variances only).
    """
    l = model.resolution_index(resolution)
    spec = model.kernel_specs[l]
    Z = model.state.inducing[l]
    eta = model.state.mean[l]
    C = model.state.cov_factor[l]
    Xq = np.asarray(Xq, dtype=np.float64)
    Lk = _prior_chol(spec, Z)
    Kxz = kernels.gram(spec, Xq, Z)
    A = cho_solve((Lk, True), Kxz.T).T
    mean = A @ eta
    V = solve_triangular(Lk, Kxz.T, lower=True)
    AC = A @ C
    var = kernels.diagonal(spec, Xq.shape[0]) - np.sum(V * V, axis=0) \
        + np.sum(AC * AC, axis=1)
    out = []
    for j in range(Xq.shape[0]):
        out.append(GaussianPrediction(
            mean=float(mean[j]),
            variance=clipped_variance(float(var[j]), context=f"point {j}"),
        ))
    return out


# ---------------------------------------------------------------------------
# Initialization


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
            max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Plain Lloyd iteration with kmeans++ seeding. Deterministic given rng."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            centers[j:] = points[rng.integers(n, size=k - j)]
            break
        centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    for _ in range(max_iter):
        dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dists, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            mask = assign == j
            if mask.any():
                new_centers[j] = points[mask].mean(axis=0)
            else:
                # re-seed an empty cluster at the farthest point
                new_centers[j] = points[np.argmax(np.min(dists, axis=1))]
        move = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if move <= tol:
            break
    return centers


def init_inducing(data, resolution, points_per_region: int = 1, seed: int = 0,
                  pad_lengthscale: float = 1.0) -> np.ndarray:
    """Inducing inputs: k cluster centers per region at one resolution.

    Runs a seeded KMeans within each region's bag and concatenates the
    centers in region order. Bags with fewer than ``points_per_region``
    points contribute all their points, padded with duplicates perturbed by
    ``1e-6 * pad_lengthscale`` so the inducing Gram stays nonsingular.
    """
    if points_per_region < 1:
        raise InputError(f"points_per_region must be >= 1, got {points_per_region}")
    if isinstance(data, Dataset):
        l = data.resolution_index(resolution) if isinstance(resolution, str) \
            else int(resolution)
        bag_list = [data.bag(i, l) for i in range(data.n_regions)]
    else:
        l = int(resolution)
        bag_list = [r.resolutions[l] for r in data]
    rng = np.random.default_rng(seed)
    k = points_per_region
    centers = []
    for bag in bag_list:
        pts = bag.points
        if pts.shape[0] <= k:
            pad = pts[rng.integers(pts.shape[0], size=k - pts.shape[0])]
            if len(pad):
                pad = pad + rng.normal(scale=1e-6 * pad_lengthscale, size=pad.shape)
            centers.append(np.concatenate([pts, pad], axis=0) if len(pad) else pts.copy())
        else:
            centers.append(_kmeans(pts, k, rng))
    return np.concatenate(centers, axis=0)


def default_kernel_specs(data: Dataset, median_cap: int = 10, seed: int = 0,
                         families=None) -> list:
    """Median-heuristic kernel specs, one per dataset resolution.

    Lengthscales come from the median pairwise distance (at most
    ``median_cap`` points per bag), scale starts at 1. Resolutions named
    like spatial coordinates get a Matern-3/2 kernel, the rest RBF, unless
    ``families`` (dict name -> family) overrides.
    """
    specs = []
    families = families or {}
    for l, name in enumerate(data.resolution_names):
        pts = data.points_block(l)
        off = data.offsets(l)
        ids = np.repeat(np.arange(data.n_regions), np.diff(off))
        ls = kernels.median_heuristic(pts, per_bag_cap=median_cap, bag_ids=ids,
                                      seed=seed)
        family = families.get(
            name, "matern32" if name.lower() in SPATIAL_NAMES else "rbf")
        specs.append(kernels.KernelSpec(
            family=family, scale=1.0, lengthscale=ls, input_dim=pts.shape[1]))
    return specs


def initialize_model(data: Dataset, kernel_specs=None, noise_var=None,
                     points_per_region: int = 1, seed: int = 0,
                     trainable_inducing: bool = False, noise_mode: str = "plain",
                     median_cap: int = 10, families=None) -> MVBAggModel:
    """Build a ready-to-train model from a labeled dataset.

    Kernels default to :func:`default_kernel_specs` with the initial scale
    set to the label variance; the noise variance starts at a tenth of the
    label variance. The variational distribution starts at the prior
    (zero mean, covariance factor = Cholesky of the jittered inducing
    Gram), so the KL term is exactly zero at initialization.
    """
    if data.labels is None:
        raise InputError("initialize_model needs a labeled dataset")
    y = data.labels
    var_y = float(np.var(y))
    if var_y <= 0.0:
        var_y = 1.0
    if kernel_specs is None:
        kernel_specs = default_kernel_specs(data, median_cap=median_cap, seed=seed,
                                            families=families)
        kernel_specs = [s.with_params(scale=var_y) for s in kernel_specs]
    kernel_specs = list(kernel_specs)
    if noise_var is None:
        noise_var = max(0.1 * var_y, 1e-8)
    inducing, means, factors = [], [], []
    for l, spec in enumerate(kernel_specs):
        Z = init_inducing(data, l, points_per_region=points_per_region,
                          seed=seed + l, pad_lengthscale=spec.lengthscale)
        inducing.append(Z)
        means.append(np.zeros(Z.shape[0]))
        factors.append(_prior_chol(spec, Z))
    state = VariationalState(inducing=inducing, mean=means, cov_factor=factors)
    return MVBAggModel(
        resolution_names=list(data.resolution_names),
        kernel_specs=kernel_specs,
        state=state,
        noise_var=float(noise_var),
        noise_mode=noise_mode,
        trainable_inducing=trainable_inducing,
    )


# ---------------------------------------------------------------------------
# Serialization


def model_to_dict(model: MVBAggModel) -> dict:
    resolutions = []
    for l, name in enumerate(model.resolution_names):
        resolutions.append({
            "name": name,
            "kernel": model.kernel_specs[l].to_dict(),
            "Z": model.state.inducing[l].tolist(),
            "eta": model.state.mean[l].tolist(),
            "chol_sigma_lower": model.state.cov_factor[l].tolist(),
        })
    return {
        "resolutions": resolutions,
        "noise_var": float(model.noise_var),
        "noise_mode": model.noise_mode,
        "trainable_z": bool(model.trainable_inducing),
    }


def model_from_dict(d: dict) -> MVBAggModel:
    try:
        entries = d["resolutions"]
        noise_var = float(d["noise_var"])
    except (KeyError, TypeError) as exc:
        raise InputError(f"model JSON is missing field: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise InputError("model JSON needs a non-empty 'resolutions' list")
    names, specs, Zs, etas, Cs = [], [], [], [], []
    for e in entries:
        try:
            names.append(str(e["name"]))
            specs.append(kernels.KernelSpec.from_dict(e["kernel"]))
            Zs.append(np.asarray(e["Z"], dtype=np.float64))
            etas.append(np.asarray(e["eta"], dtype=np.float64))
            Cs.append(np.asarray(e["chol_sigma_lower"], dtype=np.float64))
        except KeyError as exc:
            raise InputError(f"model resolution entry missing {exc.args[0]!r}") from exc
    state = VariationalState(inducing=Zs, mean=etas, cov_factor=Cs)
    return MVBAggModel(
        resolution_names=names,
        kernel_specs=specs,
        state=state,
        noise_var=noise_var,
        noise_mode=d.get("noise_mode", "plain"),
        trainable_inducing=bool(d.get("trainable_z", False)),
    )


def save_model(model: MVBAggModel, path) -> None:
    """Write the model as JSON (atomic). Round-trips bit-exactly."""
    atomic_write_text(path, json.dumps(model_to_dict(model), indent=2) + "\n")


def load_model(path) -> MVBAggModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read model {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from exc
    return model_from_dict(d)
