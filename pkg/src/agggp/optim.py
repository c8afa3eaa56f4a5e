"""Training the variational model: packing, analytic gradients, Adam.

Every constrained parameter is optimized through a smooth bijection onto
the real line:

* kernel scale, kernel lengthscale, noise variance: log
* variational covariance factor: strict lower triangle raw, diagonal
  through softplus
* inducing inputs: raw coordinates (present only when the model's
  ``trainable_inducing`` flag is set)

:func:`elbo_grad` evaluates the same bound as :func:`agggp.variational.elbo`
together with its exact gradient in packed coordinates. The gradients are
hand-derived adjoints. With ``K`` the jittered inducing Gram, ``b_i =
k(Z, X_i) w_i``, ``a_i = K^-1 b_i``, ``h = K^-1 eta``, ``g_i = K^-1 Sigma
a_i``, and per-bag likelihood weights ``alpha_i = c r_i / noise_i``,
``beta_i = -c / (2 noise_i)`` (``c`` the minibatch scaling), the bound's
adjoint with respect to ``K`` is

    W = -(a alpha) h' + (a beta) a' - (a beta) g' - (g beta) a'
        + (K^-1 Sigma K^-1 + h h' - K^-1) / 2

the adjoint of each cross column ``b_i`` is ``alpha_i h + 2 beta_i (g_i -
a_i)``, and the adjoint of ``Sigma`` is ``sum_i beta_i a_i a_i' - (K^-1 -
Sigma^-1) / 2``. Chain rules map those onto log hyperparameters (note
``dK/dlog scale = K`` including the proportional jitter), onto the
covariance factor (``dF/dC = 2 G C``), and onto inducing coordinates via
``dk(x, y)/dx = -gamma R(x, y) (x - y)``. Everything is checked against
central finite differences of the independent bound implementation
(:func:`check_gradients`).

The training loop follows the aggregate-and-step schedule: gradients of
the scaled minibatch bound accumulate and Adam applies them either every
iteration (``update="per-batch"``) or once per epoch-equivalent
(``update="per-epoch"``, the default, i.e. every ceil(n / batch)
iterations). Batches come from an epoch-wise shuffle by default or
uniformly at random (``sampling="iid"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import kernels, variational
from .bags import Dataset, MultiResBag, normalize_weights, Bag
from .errors import InputError, NumericalError
from .variational import MVBAggModel, VariationalState

_LOG_2PI = math.log(2.0 * math.pi)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus on positive inputs: log(exp(y) - 1), stably.

    Uses expm1 so tiny and huge inputs both round-trip to full precision.
    """
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# Parameter packing


@dataclass(frozen=True)
class ParamLayout:
    """Ordered (key, size) slots of the packed parameter vector."""

    entries: tuple
    slices: dict
    size: int

    def group(self, key: str) -> str:
        """"hyper" or "variational", the masking groups used by train()."""
        if key == "log_noise_var" or key.endswith((".log_scale", ".log_lengthscale",
                                                   ".inducing")):
            return "hyper"
        return "variational"


def layout_for(model: MVBAggModel) -> ParamLayout:
    entries = [("log_noise_var", 1)]
    for l in range(model.n_resolutions):
        L = model.state.inducing[l].shape[0]
        d = model.state.inducing[l].shape[1]
        entries.append((f"res{l}.log_scale", 1))
        entries.append((f"res{l}.log_lengthscale", 1))
        entries.append((f"res{l}.mean", L))
        entries.append((f"res{l}.cov_factor", L * (L + 1) // 2))
        if model.trainable_inducing:
            entries.append((f"res{l}.inducing", L * d))
    slices = {}
    pos = 0
    for key, size in entries:
        slices[key] = slice(pos, pos + size)
        pos += size
    return ParamLayout(entries=tuple(entries), slices=slices, size=pos)


def _tril_pack(C: np.ndarray) -> np.ndarray:
    L = C.shape[0]
    idx = np.tril_indices(L)
    packed = C[idx].copy()
    diag_mask = idx[0] == idx[1]
    packed[diag_mask] = softplus_inv(packed[diag_mask])
    return packed


def _tril_unpack(packed: np.ndarray, L: int) -> np.ndarray:
    idx = np.tril_indices(L)
    vals = packed.copy()
    diag_mask = idx[0] == idx[1]
    vals[diag_mask] = softplus(vals[diag_mask])
    C = np.zeros((L, L))
    C[idx] = vals
    return C


def pack(model: MVBAggModel):
    """Flatten the model's trainable parameters. Returns (theta, layout)."""
    layout = layout_for(model)
    theta = np.empty(layout.size)
    theta[layout.slices["log_noise_var"]] = math.log(model.noise_var)
    for l in range(model.n_resolutions):
        spec = model.kernel_specs[l]
        theta[layout.slices[f"res{l}.log_scale"]] = math.log(spec.scale)
        theta[layout.slices[f"res{l}.log_lengthscale"]] = math.log(spec.lengthscale)
        theta[layout.slices[f"res{l}.mean"]] = model.state.mean[l]
        theta[layout.slices[f"res{l}.cov_factor"]] = _tril_pack(model.state.cov_factor[l])
        if model.trainable_inducing:
            theta[layout.slices[f"res{l}.inducing"]] = model.state.inducing[l].ravel()
    return theta, layout


def unpack(theta: np.ndarray, layout: ParamLayout, template: MVBAggModel) -> MVBAggModel:
    """Rebuild a model from packed coordinates (template supplies shapes
    and everything not trained). The template is not mutated."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (layout.size,):
        raise InputError(f"parameter vector has shape {theta.shape}, expected ({layout.size},)")
    specs, means, factors, inducing = [], [], [], []
    for l in range(template.n_resolutions):
        spec = template.kernel_specs[l]
        L = template.state.inducing[l].shape[0]
        d = template.state.inducing[l].shape[1]
        specs.append(spec.with_params(
            scale=math.exp(float(theta[layout.slices[f"res{l}.log_scale"]][0])),
            lengthscale=math.exp(float(theta[layout.slices[f"res{l}.log_lengthscale"]][0])),
        ))
        means.append(theta[layout.slices[f"res{l}.mean"]].copy())
        factors.append(_tril_unpack(theta[layout.slices[f"res{l}.cov_factor"]], L))
        if template.trainable_inducing:
            inducing.append(theta[layout.slices[f"res{l}.inducing"]].reshape(L, d).copy())
        else:
            inducing.append(template.state.inducing[l].copy())
    state = VariationalState(inducing=inducing, mean=means, cov_factor=factors)
    return MVBAggModel(
        resolution_names=list(template.resolution_names),
        kernel_specs=specs,
        state=state,
        noise_var=math.exp(float(theta[layout.slices["log_noise_var"]][0])),
        noise_mode=template.noise_mode,
        trainable_inducing=template.trainable_inducing,
    )


# ---------------------------------------------------------------------------
# Bound value and gradient


@dataclass
class _ResPre:
    """Per-resolution quantities that depend only on parameters."""

    spec: object
    Z: np.ndarray
    eta: np.ndarray
    C: np.ndarray
    K_raw: np.ndarray
    aux_zz: np.ndarray
    K_jit: np.ndarray
    Lk: np.ndarray
    Kinv: np.ndarray
    Sigma: np.ndarray
    h: np.ndarray
    P2: np.ndarray
    kl: float


def _precompute(model: MVBAggModel) -> list:
    pres = []
    for l in range(model.n_resolutions):
        spec = model.kernel_specs[l]
        Z = model.state.inducing[l]
        eta = model.state.mean[l]
        C = model.state.cov_factor[l]
        K_raw, aux_zz = kernels.gram_terms(spec, Z)
        K_jit = kernels.add_jitter(K_raw, spec.scale)
        Lk = kernels.chol_lower(K_jit, context=f"inducing Gram (resolution {l})")
        L = Z.shape[0]
        eye = np.eye(L)
        Kinv = cho_solve((Lk, True), eye)
        Sigma = C @ C.T
        h = cho_solve((Lk, True), eta)
        P2 = Kinv @ Sigma @ Kinv
        S = solve_triangular(Lk, C, lower=True)
        trace = float(np.sum(S * S))
        quad = float(eta @ h)
        logdet_prior = 2.0 * float(np.sum(np.log(np.diag(Lk))))
        logdet_q = 2.0 * float(np.sum(np.log(np.diag(C))))
        kl = 0.5 * (trace + quad - L + logdet_prior - logdet_q)
        pres.append(_ResPre(spec=spec, Z=Z, eta=eta, C=C, K_raw=K_raw,
                            aux_zz=aux_zz, K_jit=K_jit, Lk=Lk, Kinv=Kinv,
                            Sigma=Sigma, h=h, P2=P2, kl=kl))
    return pres


def _check_batch(model, regions, n_total):
    regions = list(regions)
    if not regions:
        raise InputError("empty batch")
    if n_total < len(regions):
        raise InputError(f"n_total={n_total} smaller than the batch ({len(regions)})")
    for r in regions:
        if r.n_resolutions != model.n_resolutions:
            raise InputError(
                f"region {r.region_id!r} has {r.n_resolutions} resolutions, "
                f"model expects {model.n_resolutions}"
            )
        if r.label is None:
            raise InputError(f"region {r.region_id!r} has no label")
    return regions


def _elbo_and_grad(pres, model, regions, n_total, layout):
    B = len(regions)
    y = np.array([r.label for r in regions], dtype=np.float64)
    s = np.array([variational.bag_noise_factor(r, model.noise_mode) for r in regions])
    noise = s * model.noise_var
    c = n_total / B

    kl_total = 0.0
    caches = []
    mu_tot = np.zeros(B)
    v_tot = np.zeros(B)
    for l, pre in enumerate(pres):
        kl_total += pre.kl
        bag_list = [r.resolutions[l] for r in regions]
        Xs = np.concatenate([b.points for b in bag_list], axis=0)
        ws = np.concatenate([b.weights for b in bag_list])
        counts = np.array([b.n_points for b in bag_list], dtype=np.int64)
        starts = np.zeros(B, dtype=np.int64)
        np.cumsum(counts[:-1], out=starts[1:])
        Kzx, aux_zx = kernels.gram_terms(pre.spec, pre.Z, Xs)
        b = np.add.reduceat(Kzx * ws[None, :], starts, axis=1)
        a = cho_solve((pre.Lk, True), b)
        g = pre.P2 @ b
        Sa = pre.Sigma @ a
        xx_terms = [kernels.gram_terms(pre.spec, bg.points) for bg in bag_list]
        quad = np.array([bg.weights @ t[0] @ bg.weights
                         for bg, t in zip(bag_list, xx_terms)])
        mu = b.T @ pre.h
        v = quad - np.sum(b * a, axis=0) + np.sum(a * Sa, axis=0)
        mu_tot += mu
        v_tot += v
        caches.append((bag_list, Xs, ws, starts, Kzx, aux_zx, b, a, g, xx_terms, quad))

    r = y - mu_tot
    Q = r * r + v_tot
    value = float(np.sum(-0.5 * c * Q / noise - 0.5 * c * np.log(2.0 * math.pi * noise))
                  - kl_total)

    alpha = c * r / noise
    beta = -0.5 * c / noise

    grad = np.zeros(layout.size)
    grad[layout.slices["log_noise_var"]] = float(np.sum(c * (Q / (2.0 * noise) - 0.5)))

    for l, pre in enumerate(pres):
        bag_list, Xs, ws, starts, Kzx, aux_zx, b, a, g, xx_terms, quad = caches[l]
        a_beta = a * beta[None, :]
        g_beta = g * beta[None, :]
        a_alpha = a @ alpha
        What = (-np.outer(a_alpha, pre.h)
                + a_beta @ a.T - a_beta @ g.T - g_beta @ a.T
                + 0.5 * (pre.P2 + np.outer(pre.h, pre.h) - pre.Kinv))
        U = np.outer(pre.h, alpha) + 2.0 * (g - a) * beta[None, :]

        grad[layout.slices[f"res{l}.mean"]] = a_alpha - pre.h

        G = a_beta @ a.T - 0.5 * pre.Kinv
        G = 0.5 * (G + G.T)
        dC = 2.0 * (G @ pre.C)
        idx = np.tril_indices(pre.C.shape[0])
        packed = dC[idx]
        diag_mask = idx[0] == idx[1]
        # The -log det Sigma term contributes Sigma^{-1} C = C^{-T}, whose
        # lower triangle is exactly diag(1/C_ii). Adding it in that form
        # keeps the gradient finite when C is badly conditioned; forming
        # Sigma^{-1} explicitly loses everything to cancellation.
        packed[diag_mask] += 1.0 / np.diag(pre.C)
        # chain through softplus: d(diag)/d(raw) = sigmoid(raw) = 1 - exp(-diag)
        packed[diag_mask] *= -np.expm1(-np.diag(pre.C))
        grad[layout.slices[f"res{l}.cov_factor"]] = packed

        dscale = (float(np.sum(What * pre.K_jit)) + float(np.sum(U * b))
                  + float(np.sum(beta * quad)))
        grad[layout.slices[f"res{l}.log_scale"]] = dscale

        D_zz = kernels.dlog_lengthscale(pre.spec, pre.K_raw, pre.aux_zz)
        D_zx = kernels.dlog_lengthscale(pre.spec, Kzx, aux_zx)
        Db = np.add.reduceat(D_zx * ws[None, :], starts, axis=1)
        wDw = np.array([
            bg.weights @ kernels.dlog_lengthscale(pre.spec, t[0], t[1]) @ bg.weights
            for bg, t in zip(bag_list, xx_terms)
        ])
        dlen = (float(np.sum(What * D_zz)) + float(np.sum(U * Db))
                + float(np.sum(beta * wDw)))
        grad[layout.slices[f"res{l}.log_lengthscale"]] = dlen

        if model.trainable_inducing:
            gamma, R_zz = kernels.position_weight(pre.spec, pre.K_raw, pre.aux_zz)
            Smat = What + What.T
            M = Smat * R_zz
            gZ = -gamma * (M.sum(axis=1)[:, None] * pre.Z - M @ pre.Z)
            _, R_zx = kernels.position_weight(pre.spec, Kzx, aux_zx)
            Rw = R_zx * ws[None, :]
            bR = np.add.reduceat(Rw, starts, axis=1)
            T1 = np.sum(U * bR, axis=1)
            acc = np.zeros_like(pre.Z)
            ends = np.append(starts[1:], Xs.shape[0])
            for i in range(B):
                sl = slice(starts[i], ends[i])
                acc += U[:, i:i + 1] * (Rw[:, sl] @ Xs[sl])
            gZ += -gamma * (T1[:, None] * pre.Z - acc)
            grad[layout.slices[f"res{l}.inducing"]] = gZ.ravel()

    if not np.isfinite(value):
        raise NumericalError("bound evaluated to a non-finite value")
    if not np.all(np.isfinite(grad)):
        for key, sl in layout.slices.items():
            if not np.all(np.isfinite(grad[sl])):
                raise NumericalError(f"non-finite gradient for parameter {key!r}")
    return value, grad


def elbo_grad(model: MVBAggModel, regions, n_total: int):
    """Minibatch bound and its gradient in packed coordinates.

    Pure: recomputes everything from the model. Returns ``(value, grad)``
    with ``grad`` laid out per :func:`layout_for`.
    """
    regions = _check_batch(model, regions, n_total)
    layout = layout_for(model)
    pres = _precompute(model)
    return _elbo_and_grad(pres, model, regions, n_total, layout)


# ---------------------------------------------------------------------------
# Adam and the training loop


@dataclass
class AdamState:
    """First/second moment accumulators for Adam (ascent direction)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))


def adam_init(size: int, lr: float = 1e-3) -> AdamState:
    return AdamState(lr=lr, m=np.zeros(size), v=np.zeros(size))


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One ascent update; mutates the moment accumulators, returns new theta."""
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    return theta + state.lr * mhat / (np.sqrt(vhat) + state.eps)


def train(model: MVBAggModel, data, iterations: int = 20000, batch_size: int = 32,
          lr: float = 1e-3, seed: int = 0, update: str = "per-epoch",
          sampling: str = "epoch", train_hyperparams: bool = True,
          train_variational: bool = True):
    """Run the minibatch training loop.

    Parameters
    ----------
    model : MVBAggModel
        Starting point; not mutated.
    data : Dataset or sequence of MultiResBag
        Labeled training regions.
    iterations : int
        Number of minibatch evaluations (not update steps).
    batch_size : int
        Capped at the number of regions.
    update : {"per-epoch", "per-batch"}
        Accumulated gradients are applied every ceil(n / batch) iterations
        or every iteration. Leftover accumulation at the end (when
        iterations is not a multiple of the cadence) is discarded.
    sampling : {"epoch", "iid"}
        Epoch-wise shuffling into consecutive batches, or an independent
        uniform draw without replacement per iteration.
    train_hyperparams, train_variational : bool
        Masks for the two parameter groups (inducing inputs count as
        hyperparameters).

    Returns
    -------
    (model, trace)
        The trained model and a list of (iteration, bound value) pairs,
        one per iteration, each value the scaled minibatch bound.
    """
    if update not in ("per-epoch", "per-batch"):
        raise InputError(f"unknown update mode {update!r}")
    if sampling not in ("epoch", "iid"):
        raise InputError(f"unknown sampling mode {sampling!r}")
    if iterations < 1:
        raise InputError("iterations must be >= 1")
    if not (lr > 0 and math.isfinite(lr)):
        raise InputError(f"lr must be finite and > 0, got {lr!r}")
    if not (train_hyperparams or train_variational):
        raise InputError("nothing to train: both parameter groups are frozen")
    regions = data.bags() if isinstance(data, Dataset) else list(data)
    n = len(regions)
    if n == 0:
        raise InputError("no training regions")
    for r in regions:
        if r.label is None:
            raise InputError(f"region {r.region_id!r} has no label")
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    B = min(batch_size, n)
    updates_every = math.ceil(n / B) if update == "per-epoch" else 1

    current = model.copy()
    theta, layout = pack(current)
    mask = np.ones(layout.size)
    for key, sl in layout.slices.items():
        g = layout.group(key)
        if (g == "hyper" and not train_hyperparams) or \
           (g == "variational" and not train_variational):
            mask[sl] = 0.0
    adam = adam_init(layout.size, lr=lr)
    rng = np.random.default_rng(seed)
    perm = None
    pos = 0

    def next_batch():
        nonlocal perm, pos
        if sampling == "iid":
            return rng.choice(n, size=B, replace=False)
        if perm is None or pos >= n:
            perm = rng.permutation(n)
            pos = 0
        out = perm[pos:pos + B]
        pos += B
        return out

    pres = _precompute(current)
    acc = np.zeros(layout.size)
    trace = []
    for it in range(1, iterations + 1):
        idx = next_batch()
        batch = [regions[j] for j in idx]
        try:
            val, grad = _elbo_and_grad(pres, current, batch, n, layout)
        except NumericalError as exc:
            exc.trace = trace
            raise
        trace.append((it, val))
        acc += grad * mask
        if it % updates_every == 0:
            theta = adam_step(adam, theta, acc)
            acc[:] = 0.0
            current = unpack(theta, layout, current)
            pres = _precompute(current)
    return current, trace


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-finite-difference comparison."""

    value: float
    max_rel_error: float
    per_group: dict
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def check_gradients(model: MVBAggModel, regions, n_total: int | None = None,
                    rel_tol: float = 1e-4) -> GradCheckReport:
    """Compare :func:`elbo_grad` against central finite differences.

    The finite differences run through the independent bound implementation
    in :mod:`agggp.variational`, so agreement validates both routes. Step
    size per coordinate is ``1e-5 * (1 + |theta_j|)``; the error is
    relative with a floor of 1e-3 on the denominator.
    """
    regions = list(regions)
    if n_total is None:
        n_total = len(regions)
    theta, layout = pack(model)
    value, analytic = elbo_grad(model, regions, n_total)
    numeric = np.empty_like(theta)
    for j in range(theta.size):
        h = 1e-5 * (1.0 + abs(float(theta[j])))
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        fp = variational.elbo(unpack(tp, layout, model), regions, n_total)
        fm = variational.elbo(unpack(tm, layout, model), regions, n_total)
        numeric[j] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    rel = np.abs(analytic - numeric) / denom
    per_group = {key: float(np.max(rel[sl])) for key, sl in layout.slices.items()}
    max_rel = float(np.max(rel))
    return GradCheckReport(
        value=value,
        max_rel_error=max_rel,
        per_group=per_group,
        passed=bool(max_rel <= rel_tol),
        analytic=analytic,
        numeric=numeric,
    )


def random_instance(n_regions: int = 6, n_resolutions: int = 2,
                    points_range=(2, 6), inducing_per_res: int = 3,
                    seed: int = 0, trainable_inducing: bool = False,
                    noise_mode: str = "plain"):
    """Small random model + labeled regions for gradient checks and tests.

    Dimensions cycle through 2, 1, 3 per resolution; weights are non-uniform
    so the weighting paths are exercised. Returns ``(model, regions)``.
    """
    rng = np.random.default_rng(seed)
    dims = [((l + 1) % 3) + 1 for l in range(n_resolutions)]
    specs = []
    for l in range(n_resolutions):
        specs.append(kernels.KernelSpec(
            family="rbf" if l % 2 == 0 else "matern32",
            scale=float(np.exp(rng.normal(0.0, 0.3))),
            lengthscale=float(1.2 * np.exp(rng.normal(0.0, 0.3))),
            input_dim=dims[l],
        ))
    regions = []
    for i in range(n_regions):
        bags = []
        for l in range(n_resolutions):
            npts = int(rng.integers(points_range[0], points_range[1]))
            pts = rng.normal(size=(npts, dims[l]))
            w = normalize_weights(rng.uniform(0.5, 1.5, size=npts))
            bags.append(Bag(region_id=f"r{i}", points=pts, weights=w))
        regions.append(MultiResBag(region_id=f"r{i}", resolutions=tuple(bags),
                                   label=float(rng.normal())))
    inducing, means, factors = [], [], []
    for l in range(n_resolutions):
        L = inducing_per_res
        Z = rng.normal(size=(L, dims[l]))
        eta = rng.normal(0.0, 0.5, size=L)
        A = rng.normal(0.0, 0.3, size=(L, L))
        C = np.tril(A, k=-1) + np.diag(np.exp(rng.normal(-0.5, 0.3, size=L)))
        inducing.append(Z)
        means.append(eta)
        factors.append(C)
    model = MVBAggModel(
        resolution_names=[f"res{l}" for l in range(n_resolutions)],
        kernel_specs=specs,
        state=VariationalState(inducing=inducing, mean=means, cov_factor=factors),
        noise_var=float(np.exp(rng.normal(math.log(0.2), 0.3))),
        noise_mode=noise_mode,
        trainable_inducing=trainable_inducing,
    )
    return model, regions
