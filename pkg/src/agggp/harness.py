"""Cross-validated comparison of the aggregate regression methods.

``run_cv`` splits a dataset into k folds, fits one method per fold on the
remaining regions, predicts the held-out labels, and collects RMSE, MAPE,
central-interval coverage, and wall-clock timings into a :class:`CVReport`.
``format_table`` renders several reports side by side.

Folds can run concurrently: the ``threads`` argument, or the
``AGGGP_THREADS`` environment variable when the argument is absent,
gives the worker count (unset means 1, ``0`` means all CPUs).
"""

from __future__ import annotations

import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import distreg, exact_gp, optim, variational
from .bags import Dataset
from .errors import InputError

METHODS = ("mvbagg", "vbagg", "exact-agg", "centroid-gp", "lre", "krre", "lr")

_ZERO_LABEL_TOL = 1e-12


def kfold(n: int, k: int = 5, seed: int = 0) -> list:
    """Shuffled k-fold index split of ``range(n)``.

    Returns ``k`` sorted index arrays whose sizes differ by at most one.
    """
    if k < 2:
        raise InputError(f"k must be >= 2, got {k}")
    if k > n:
        raise InputError(f"cannot make {k} folds from {n} items")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(fold) for fold in np.array_split(perm, k)]


def rmse(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise InputError("rmse: shape mismatch")
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def mape(y_true, y_pred) -> float:
    """Mean absolute percentage error, as a fraction (0.5 means 50%)."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise InputError("mape: shape mismatch")
    if np.any(np.abs(y_true) <= _ZERO_LABEL_TOL):
        raise InputError("mape is undefined for zero labels")
    return float(np.mean(np.abs((y_true - y_pred) / y_true)))


def coverage(predictions, y_true, level: float) -> float:
    """Fraction of labels inside the central ``level`` interval.

    ``predictions`` are :class:`GaussianPrediction` objects whose variance
    already includes whatever noise the interval should account for.
    """
    if not 0.0 < level < 1.0:
        raise InputError(f"coverage level must be in (0, 1), got {level}")
    y_true = np.asarray(y_true, dtype=np.float64)
    if len(predictions) != y_true.shape[0]:
        raise InputError("coverage: prediction count does not match labels")
    z = norm.ppf(0.5 * (1.0 + level))
    means = np.array([p.mean for p in predictions])
    sds = np.sqrt(np.array([p.variance for p in predictions]))
    return float(np.mean(np.abs(y_true - means) <= z * sds))


@dataclass
class CVReport:
    """Per-fold metrics and their mean/stderr summary for one method."""

    method: str
    covariates: tuple
    k: int
    seed: int
    folds: list = field(default_factory=list)
    fold_regions: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        if not self.folds:
            return out
        for key in self.folds[0]:
            vals = [f[key] for f in self.folds]
            if any(v is None for v in vals):
                continue
            vals = np.array(vals, dtype=np.float64)
            stderr = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            out[key] = {"mean": float(np.mean(vals)), "stderr": stderr}
        return out

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "covariates": list(self.covariates),
            "k": int(self.k),
            "seed": int(self.seed),
            "folds": [dict(f) for f in self.folds],
            "fold_regions": [list(r) for r in self.fold_regions],
            "summary": self.summary(),
        }


def _filtered_mape(y_true, y_pred) -> float | None:
    keep = np.abs(y_true) > _ZERO_LABEL_TOL
    if not np.all(keep):
        warnings.warn(
            f"{int(np.sum(~keep))} zero labels excluded from MAPE", RuntimeWarning,
            stacklevel=3)
    if not np.any(keep):
        return None
    return mape(y_true[keep], y_pred[keep])


def _fold_metrics(y_true, y_pred, predictions) -> dict:
    out = {
        "rmse": rmse(y_true, y_pred),
        "mape": _filtered_mape(np.asarray(y_true, dtype=np.float64),
                               np.asarray(y_pred, dtype=np.float64)),
    }
    if predictions is not None:
        out["coverage80"] = coverage(predictions, y_true, 0.80)
        out["coverage95"] = coverage(predictions, y_true, 0.95)
    else:
        out["coverage80"] = None
        out["coverage95"] = None
    return out


def _default_noise_var(y: np.ndarray) -> float:
    return max(0.1 * float(np.var(y)), 1e-8)


def _fit_predict(method: str, train: Dataset, test: Dataset, fold_seed: int,
                 params: dict) -> dict:
    """Fit one method on the train split, predict the test regions.

    Returns the fold's metric dict including timings and method extras.
    """
    test_regions = test.bags()
    y_test = np.asarray(test.labels, dtype=np.float64)
    extras: dict = {}

    if method in ("mvbagg", "vbagg"):
        t0 = time.perf_counter()
        model = variational.initialize_model(
            train,
            noise_var=params.get("noise_var"),
            points_per_region=params.get("points_per_region", 1),
            seed=fold_seed,
            trainable_inducing=params.get("trainable_inducing", False),
            noise_mode=params.get("noise_mode", "plain"),
            median_cap=params.get("median_cap", 10),
            families=params.get("families"),
        )
        model, trace = optim.train(
            model, train,
            iterations=params.get("iterations", 20000),
            batch_size=params.get("batch_size", 32),
            lr=params.get("lr", 1e-3),
            seed=fold_seed,
            update=params.get("update", "per-epoch"),
            sampling=params.get("sampling", "epoch"),
        )
        fit_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        preds = [variational.predict_bag(model, r, include_noise=True)
                 for r in test_regions]
        pred_s = time.perf_counter() - t0
        y_pred = np.array([p.mean for p in preds])
        extras["final_elbo"] = trace[-1][1] if trace else None

    elif method in ("exact-agg", "centroid-gp"):
        if method == "centroid-gp":
            train, test = train.centroids(), test.centroids()
            test_regions = test.bags()
        t0 = time.perf_counter()
        specs = params.get("kernel_specs")
        if specs is None:
            specs = variational.default_kernel_specs(
                train, median_cap=params.get("median_cap", 10), seed=fold_seed,
                families=params.get("families"))
        noise_var = params.get("noise_var")
        if noise_var is None:
            noise_var = _default_noise_var(np.asarray(train.labels))
        model = exact_gp.fit(train.bags(), specs, noise_var=noise_var)
        fit_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        latent = exact_gp.predict_many(model, test_regions)
        pred_s = time.perf_counter() - t0
        preds = [variational.GaussianPrediction(p.mean, p.variance + noise_var)
                 for p in latent]
        y_pred = np.array([p.mean for p in preds])

    elif method in ("lre", "krre"):
        t0 = time.perf_counter()
        specs = params.get("kernel_specs")
        if specs is None:
            specs = variational.default_kernel_specs(
                train, median_cap=params.get("median_cap", 10), seed=fold_seed,
                families=params.get("families"))
        ridge = params.get("ridge", 0.1)
        if method == "lre":
            model = distreg.fit_lre(train.bags(), specs, ridge=ridge)
        else:
            model = distreg.fit_krre(
                train.bags(), specs, ridge=ridge,
                second_lengthscale=params.get("second_lengthscale"))
        fit_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        y_pred = distreg.predict_many(model, test_regions)
        pred_s = time.perf_counter() - t0
        preds = None
        extras["gram_seconds"] = model.gram_seconds

    elif method == "lr":
        t0 = time.perf_counter()
        model = distreg.fit_lr_centroid(
            train.bags(), add_intercept=params.get("add_intercept", True))
        fit_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        y_pred = distreg.predict_lr_many(model, test_regions)
        pred_s = time.perf_counter() - t0
        preds = None

    else:
        raise InputError(f"unknown method {method!r}; expected one of {METHODS}")

    fold = _fold_metrics(y_test, y_pred, preds)
    fold["fit_seconds"] = fit_s
    fold["predict_seconds"] = pred_s
    fold.update(extras)
    return fold


def _resolve_threads(threads) -> int:
    if threads is None:
        raw = os.environ.get("AGGGP_THREADS", "")
        if not raw.strip():
            return 1
        try:
            threads = int(raw)
        except ValueError as exc:
            raise InputError(f"AGGGP_THREADS must be an integer, got {raw!r}") from exc
    threads = int(threads)
    if threads < 0:
        raise InputError(f"thread count must be >= 0, got {threads}")
    if threads == 0:
        threads = os.cpu_count() or 1
    return threads


def run_cv(data: Dataset, method: str, k: int = 5, seed: int = 0,
           resolutions=None, params: dict | None = None,
           threads: int | None = None) -> CVReport:
    """k-fold cross validation of one method on a labeled dataset.

    ``resolutions`` restricts the covariates used (``vbagg`` requires
    exactly one). ``params`` passes method options through; each fold is
    seeded with ``seed + fold_index``. Labels must be present.
    """
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; expected one of {METHODS}")
    if data.labels is None:
        raise InputError("cross validation needs labels")
    params = dict(params or {})
    if resolutions is not None:
        data = data.select_resolutions(list(resolutions))
    if method == "vbagg" and data.n_resolutions != 1:
        raise InputError(
            "vbagg uses a single resolution; pass resolutions=[name] to pick one")
    folds = kfold(data.n_regions, k=k, seed=seed)
    report = CVReport(method=method, covariates=data.resolution_names, k=k, seed=seed)
    all_idx = np.arange(data.n_regions)

    def one(fold_index: int) -> tuple:
        test_idx = folds[fold_index]
        train_idx = np.setdiff1d(all_idx, test_idx)
        fold = _fit_predict(method, data.subset(train_idx), data.subset(test_idx),
                            seed + fold_index, params)
        return fold, [data.region_ids[i] for i in test_idx]

    n_threads = _resolve_threads(threads)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(one, range(k)))
    else:
        results = [one(i) for i in range(k)]
    for fold, rids in results:
        report.folds.append(fold)
        report.fold_regions.append(rids)
    return report


def format_table(reports) -> str:
    """Aligned text table of report summaries, one row per method."""
    cols = ["method", "rmse", "mape", "coverage80", "coverage95", "fit_seconds"]
    rows = [cols]
    for rep in reports:
        s = rep.summary()

        def cell(key: str) -> str:
            if key not in s:
                return "-"
            return f"{s[key]['mean']:.4f} +/- {s[key]['stderr']:.4f}"

        rows.append([rep.method] + [cell(c) for c in cols[1:]])
    widths = [max(len(r[j]) for r in rows) for j in range(len(cols))]
    lines = []
    for i, r in enumerate(rows):
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
