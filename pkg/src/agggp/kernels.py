"""Stationary covariance kernels and Gram matrix utilities.

Two isotropic families are supported:

* squared exponential (``"rbf"``)::

      k(x, y) = s * exp(-||x - y||^2 / (2 * l^2))

* Matern with smoothness 3/2 (``"matern32"``)::

      k(x, y) = s * (1 + sqrt(3) * r / l) * exp(-sqrt(3) * r / l),  r = ||x - y||

where ``s`` is the variance at zero distance and ``l`` the lengthscale.
Both hyperparameters are strictly positive; optimizers work with their
logarithms (see :mod:`agggp.optim`).

Gram matrices of smooth kernels are often numerically singular, so a small
diagonal jitter proportional to the kernel variance is added wherever a
*bare* Gram matrix is factored (:func:`add_jitter`). Linear systems that
already include a noise or ridge diagonal are factored as-is.

The module also provides the median heuristic for choosing lengthscales
from pairwise distances, with an optional per-bag cap on how many points
each bag contributes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import InputError, NumericalError

FAMILIES = ("rbf", "matern32")

# Relative diagonal jitter used when factoring a bare kernel Gram matrix.
JITTER_FRACTION = 1e-6

_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel description.

    Parameters
    ----------
    family : str
        One of ``"rbf"`` or ``"matern32"``.
    scale : float
        Variance at zero distance, ``k(x, x)``. Strictly positive.
    lengthscale : float
        Isotropic lengthscale. Strictly positive.
    input_dim : int
        Dimension of the points the kernel operates on.
    """

    family: str
    scale: float
    lengthscale: float
    input_dim: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(
                f"unknown kernel family {self.family!r}; expected one of {FAMILIES}"
            )
        if not (isinstance(self.scale, (int, float)) and math.isfinite(self.scale)
                and self.scale > 0):
            raise InputError(f"kernel scale must be finite and > 0, got {self.scale!r}")
        if not (isinstance(self.lengthscale, (int, float))
                and math.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise InputError(
                f"kernel lengthscale must be finite and > 0, got {self.lengthscale!r}"
            )
        if not (isinstance(self.input_dim, int) and self.input_dim >= 1):
            raise InputError(f"input_dim must be a positive integer, got {self.input_dim!r}")

    def with_params(self, scale=None, lengthscale=None) -> "KernelSpec":
        """Copy of this spec with scale and/or lengthscale replaced."""
        return KernelSpec(
            family=self.family,
            scale=float(self.scale if scale is None else scale),
            lengthscale=float(self.lengthscale if lengthscale is None else lengthscale),
            input_dim=self.input_dim,
        )

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "scale": float(self.scale),
            "lengthscale": float(self.lengthscale),
            "input_dim": int(self.input_dim),
        }

    @staticmethod
    def from_dict(d: dict) -> "KernelSpec":
        try:
            return KernelSpec(
                family=d["family"],
                scale=float(d["scale"]),
                lengthscale=float(d["lengthscale"]),
                input_dim=int(d["input_dim"]),
            )
        except KeyError as exc:
            raise InputError(f"kernel spec is missing field {exc.args[0]!r}") from exc


def _check_points(spec: KernelSpec, X: np.ndarray, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"{name} must be a 2-d array of points, got shape {X.shape}")
    if X.shape[1] != spec.input_dim:
        raise InputError(
            f"{name} has dimension {X.shape[1]}, kernel expects {spec.input_dim}"
        )
    if not np.all(np.isfinite(X)):
        raise InputError(f"{name} contains non-finite values")
    return X


def evaluate(spec: KernelSpec, x, y) -> float:
    """Kernel value between two single points."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    return float(gram(spec, x, y)[0, 0])


def gram(spec: KernelSpec, X, Y=None) -> np.ndarray:
    """Kernel matrix ``[k(x_i, y_j)]`` without any jitter.

    Parameters
    ----------
    X : ndarray, shape (n, d)
    Y : ndarray, shape (m, d), optional
        Defaults to ``X``.

    Returns
    -------
    ndarray, shape (n, m)
    """
    value, _ = gram_terms(spec, X, Y)
    return value


def gram_terms(spec: KernelSpec, X, Y=None):
    """Kernel matrix plus the distance-derived auxiliary matrix.

    The auxiliary matrix is what the hyperparameter and position gradients
    need alongside the kernel values: squared distances for ``rbf`` and the
    scaled distance ``t = sqrt(3) r / l`` for ``matern32``. Returned so
    callers never have to invert the kernel formula.

    Returns
    -------
    (value, aux) : pair of ndarray, each shape (n, m)
    """
    X = _check_points(spec, X, "X")
    if Y is None:
        Y = X
    else:
        Y = _check_points(spec, Y, "Y")
    if spec.family == "rbf":
        sq = cdist(X, Y, "sqeuclidean")
        value = spec.scale * np.exp(sq * (-0.5 / spec.lengthscale**2))
        return value, sq
    t = cdist(X, Y) * (_SQRT3 / spec.lengthscale)
    value = spec.scale * (1.0 + t) * np.exp(-t)
    return value, t


def dlog_lengthscale(spec: KernelSpec, value: np.ndarray, aux: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the Gram matrix w.r.t. log lengthscale.

    ``value`` and ``aux`` must come from :func:`gram_terms` with the same
    spec. (The derivative w.r.t. log scale is the Gram matrix itself, so no
    helper is needed for it.)
    """
    if spec.family == "rbf":
        return value * (aux / spec.lengthscale**2)
    # d/dlog(l) of s*(1+t)e^-t with t proportional to 1/l is s*t^2*e^-t.
    return value * (aux * aux / (1.0 + aux))


def position_weight(spec: KernelSpec, value: np.ndarray, aux: np.ndarray):
    """Radial factor of the kernel's gradient in its first argument.

    For both families ``d k(x, y) / d x = -gamma * R(x, y) * (x - y)`` with
    a scalar ``gamma`` and a matrix-valued ``R`` returned here. ``value``
    and ``aux`` must come from :func:`gram_terms`.

    Returns
    -------
    (gamma, R) : float and ndarray of the Gram shape
    """
    if spec.family == "rbf":
        return 1.0 / spec.lengthscale**2, value
    return 3.0 / spec.lengthscale**2, value / (1.0 + aux)


def diagonal(spec: KernelSpec, n: int) -> np.ndarray:
    """``k(x, x)`` repeated n times (stationary kernels are constant there)."""
    return np.full(n, float(spec.scale))


def add_jitter(K: np.ndarray, scale: float) -> np.ndarray:
    """Copy of a square Gram matrix with ``JITTER_FRACTION * scale`` added
    to the diagonal. Used before factoring bare kernel Grams."""
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise InputError(f"expected a square matrix, got shape {K.shape}")
    out = K.copy()
    out.flat[:: K.shape[0] + 1] += JITTER_FRACTION * float(scale)
    return out


def chol_lower(A: np.ndarray, context: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor, raising :class:`NumericalError` on failure."""
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky factorization of {context} failed: {exc}") from exc


def median_heuristic(points, per_bag_cap: int | None = None, bag_ids=None,
                     seed: int = 0) -> float:
    """Median pairwise distance among the given points.

    Parameters
    ----------
    points : ndarray, shape (n, d)
    per_bag_cap : int, optional
        If given together with ``bag_ids``, at most this many points per bag
        are retained (uniform subsample, seeded) before distances are taken.
        Keeps the heuristic affordable when bags are large.
    bag_ids : sequence of hashables, length n, optional
        Bag membership of each point.
    seed : int
        Seed for the subsampling RNG.

    Returns
    -------
    float
        The median distance over distinct pairs of retained points.

    Raises
    ------
    InputError
        If fewer than two points remain or the median distance is zero
        (all retained points coincide), which would give a degenerate
        lengthscale.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise InputError(f"points must be 2-d, got shape {points.shape}")
    if per_bag_cap is not None:
        if bag_ids is None:
            raise InputError("per_bag_cap requires bag_ids")
        if per_bag_cap < 1:
            raise InputError(f"per_bag_cap must be >= 1, got {per_bag_cap}")
        if len(bag_ids) != len(points):
            raise InputError("bag_ids length does not match points")
        rng = np.random.default_rng(seed)
        keep = []
        seen: dict = {}
        for idx, bid in enumerate(bag_ids):
            seen.setdefault(bid, []).append(idx)
        for bid in seen:
            idx = np.asarray(seen[bid])
            if len(idx) > per_bag_cap:
                idx = np.sort(rng.choice(idx, size=per_bag_cap, replace=False))
            keep.append(idx)
        points = points[np.concatenate(keep)]
    if len(points) < 2:
        raise InputError("median heuristic needs at least two points")
    med = float(np.median(pdist(points)))
    if med <= 0.0:
        raise InputError("median pairwise distance is zero; cannot set a lengthscale")
    return med
