"""Command-line interface.

Subcommands cover the full workflow: ``synth`` generates datasets,
``fit`` trains the variational model, ``predict`` and ``disagg`` read a
saved model back, ``baseline`` runs the non-variational methods, ``cv``
cross-validates any method, and ``check-grad`` verifies the gradient
engine against finite differences.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical or
resource failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys

import numpy as np

from . import distreg, exact_gp, harness, optim, synth, variational
from .bags import load_dataset
from .errors import InputError, NumericalError, ResourceError
from .ioutil import atomic_write_text, format_float

Z95 = 1.959964


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors follow the exit-code contract."""

    def error(self, message):
        raise InputError(message)


def _split_names(raw: str | None) -> list | None:
    if raw is None:
        return None
    names = [s.strip() for s in raw.split(",") if s.strip()]
    if not names:
        raise InputError("empty resolution list")
    return names


def _load_labeled(path):
    ds = load_dataset(path)
    if ds.labels is None:
        raise InputError(f"dataset {path} has no labels")
    return ds


def _write_csv(path: str, header, rows) -> None:
    sio = io.StringIO()
    w = csv.writer(sio, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    atomic_write_text(path, sio.getvalue())


def _cmd_synth(args) -> int:
    cfg = synth.load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    result = synth.generate(cfg, out_dir=args.out)
    print(f"wrote {result.manifest_path} ({result.dataset.n_regions} regions, "
          f"noise_std {result.noise_std:.6g})")
    return 0


def _train_flags(p: _Parser) -> None:
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points-per-region", type=int, default=1)
    p.add_argument("--trainable-z", action="store_true")
    p.add_argument("--noise-mode", choices=("plain", "weighted"), default="plain")
    p.add_argument("--sampling", choices=("epoch", "iid"), default="epoch")
    p.add_argument("--update", choices=("per-epoch", "per-batch"), default="per-epoch")
    p.add_argument("--median-cap", type=int, default=10)


def _cmd_fit(args) -> int:
    ds = _load_labeled(args.data)
    names = _split_names(args.resolutions)
    if args.method == "vbagg":
        if names is None and ds.n_resolutions != 1:
            raise InputError("vbagg uses one resolution; pass --resolutions name")
        if names is not None and len(names) != 1:
            raise InputError("vbagg uses exactly one resolution")
    if names is not None:
        ds = ds.select_resolutions(names)
    model = variational.initialize_model(
        ds, points_per_region=args.points_per_region, seed=args.seed,
        trainable_inducing=args.trainable_z, noise_mode=args.noise_mode,
        median_cap=args.median_cap)
    model, trace = optim.train(
        model, ds, iterations=args.iters, batch_size=args.batch, lr=args.lr,
        seed=args.seed, update=args.update, sampling=args.sampling)
    variational.save_model(model, args.out)
    trace_path = args.trace if args.trace else f"{args.out}.trace.csv"
    _write_csv(trace_path, ["iteration", "elbo"],
               [[it, format_float(v)] for it, v in trace])
    final = trace[-1][1] if trace else float("nan")
    print(f"wrote {args.out} (final elbo {final:.6g}); trace at {trace_path}")
    return 0


def _cmd_predict(args) -> int:
    model = variational.load_model(args.model)
    ds = load_dataset(args.data)
    ds = ds.select_resolutions(model.resolution_names)
    rows = []
    for region in ds.bags():
        p = variational.predict_bag(model, region, include_noise=not args.no_noise)
        sd = np.sqrt(p.variance)
        rows.append([region.region_id, format_float(p.mean), format_float(p.variance),
                     format_float(p.mean - Z95 * sd), format_float(p.mean + Z95 * sd)])
    _write_csv(args.out, ["region_id", "mean", "variance", "lower95", "upper95"], rows)
    print(f"wrote {args.out} ({len(rows)} regions)")
    return 0


def _cmd_disagg(args) -> int:
    model = variational.load_model(args.model)
    l = model.resolution_index(args.resolution)
    Z = model.state.inducing[l]
    if Z.shape[1] != 2:
        raise InputError(
            f"resolution {args.resolution!r} has dimension {Z.shape[1]}, "
            f"disagg grids are 2-d")
    try:
        w, h = (int(v) for v in args.grid.lower().split("x"))
    except ValueError as exc:
        raise InputError(f"--grid expects WxH, got {args.grid!r}") from exc
    if w < 1 or h < 1:
        raise InputError("grid sides must be >= 1")
    if args.bounds:
        try:
            xmin, xmax, ymin, ymax = (float(v) for v in args.bounds.split(","))
        except ValueError as exc:
            raise InputError(
                f"--bounds expects xmin,xmax,ymin,ymax, got {args.bounds!r}") from exc
    else:
        xmin, xmax = float(Z[:, 0].min()), float(Z[:, 0].max())
        ymin, ymax = float(Z[:, 1].min()), float(Z[:, 1].max())
    if not (xmin < xmax and ymin < ymax):
        raise InputError("bounds must satisfy xmin < xmax and ymin < ymax")
    lons = np.linspace(xmin, xmax, w)
    lats = np.linspace(ymin, ymax, h)
    grid_lon, grid_lat = np.meshgrid(lons, lats)
    Xq = np.column_stack([grid_lon.ravel(), grid_lat.ravel()])
    preds = variational.disaggregate(model, args.resolution, Xq)
    rows = [[i, format_float(Xq[i, 0]), format_float(Xq[i, 1]),
             format_float(p.mean), format_float(p.variance)]
            for i, p in enumerate(preds)]
    _write_csv(args.out, ["point", "lon", "lat", "mean", "var"], rows)
    print(f"wrote {args.out} ({len(rows)} grid points)")
    return 0


def _cmd_baseline(args) -> int:
    train = _load_labeled(args.data)
    test = load_dataset(args.test) if args.test else train
    names = _split_names(args.resolutions)
    if names is not None:
        train = train.select_resolutions(names)
        test = test.select_resolutions(names)
    elif test is not train:
        test = test.select_resolutions(train.resolution_names)
    method = args.method
    if method == "lr":
        model = distreg.fit_lr_centroid(train.bags())
        y_pred = distreg.predict_lr_many(model, test.bags())
    elif method in ("lre", "krre"):
        specs = variational.default_kernel_specs(
            train, median_cap=args.median_cap, seed=args.seed)
        if method == "lre":
            model = distreg.fit_lre(train.bags(), specs, ridge=args.ridge)
        else:
            model = distreg.fit_krre(train.bags(), specs, ridge=args.ridge,
                                     second_lengthscale=args.second_lengthscale)
        y_pred = distreg.predict_many(model, test.bags())
    else:
        if method == "centroid-gp":
            train, test = train.centroids(), test.centroids()
        specs = variational.default_kernel_specs(
            train, median_cap=args.median_cap, seed=args.seed)
        noise_var = args.noise_var
        if noise_var is None:
            noise_var = max(0.1 * float(np.var(np.asarray(train.labels))), 1e-8)
        model = exact_gp.fit(train.bags(), specs, noise_var=noise_var)
        y_pred = np.array([p.mean for p in exact_gp.predict_many(model, test.bags())])
    _write_csv(args.out, ["region_id", "mean"],
               [[rid, format_float(v)] for rid, v in zip(test.region_ids, y_pred)])
    print(f"wrote {args.out} ({len(y_pred)} regions, method {method})")
    return 0


def _cmd_cv(args) -> int:
    ds = _load_labeled(args.data)
    params = {
        "iterations": args.iters, "batch_size": args.batch, "lr": args.lr,
        "points_per_region": args.points_per_region,
        "trainable_inducing": args.trainable_z, "noise_mode": args.noise_mode,
        "sampling": args.sampling, "update": args.update,
        "median_cap": args.median_cap, "ridge": args.ridge,
        "second_lengthscale": args.second_lengthscale,
    }
    if args.noise_var is not None:
        params["noise_var"] = args.noise_var
    report = harness.run_cv(
        ds, args.method, k=args.k, seed=args.seed,
        resolutions=_split_names(args.resolutions), params=params,
        threads=args.threads)
    print(harness.format_table([report]))
    if args.out:
        atomic_write_text(args.out, json.dumps(report.to_dict(), indent=2) + "\n")
        print(f"wrote {args.out}")
    return 0


def _cmd_check_grad(args) -> int:
    worst = 0.0
    for seed in range(args.seed, args.seed + args.instances):
        model, regions = optim.random_instance(
            n_regions=args.regions, n_resolutions=args.resolutions, seed=seed,
            trainable_inducing=args.trainable_z, noise_mode=args.noise_mode)
        report = optim.check_gradients(model, regions, rel_tol=args.tol)
        for group, err in sorted(report.per_group.items()):
            print(f"seed {seed}  {group:<16} max rel err {err:.3e}")
        worst = max(worst, report.max_rel_error)
    if worst > args.tol:
        raise NumericalError(
            f"gradient check failed: max rel error {worst:.3e} > {args.tol:g}")
    print(f"gradients ok (worst {worst:.3e} <= {args.tol:g})")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="agggp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", help="train the variational model on a dataset")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--method", choices=("mvbagg", "vbagg"), default="mvbagg")
    p.add_argument("--resolutions", default=None, help="comma-separated names")
    p.add_argument("--trace", default=None,
                   help="ELBO trace CSV path (default <out>.trace.csv)")
    _train_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("predict", help="predict region labels with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-noise", action="store_true",
                   help="intervals for the latent aggregate, without observation noise")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("disagg", help="posterior of one latent on a point grid")
    p.add_argument("--model", required=True)
    p.add_argument("--resolution", required=True)
    p.add_argument("--grid", required=True, help="WxH, e.g. 50x40")
    p.add_argument("--bounds", default=None, help="xmin,xmax,ymin,ymax "
                   "(default: inducing point bounding box)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_disagg)

    p = sub.add_parser("baseline", help="fit a non-variational baseline and predict")
    p.add_argument("--data", required=True, help="labeled training manifest")
    p.add_argument("--test", default=None, help="manifest to predict (default: --data)")
    p.add_argument("--method", required=True,
                   choices=("exact-agg", "centroid-gp", "lre", "krre", "lr"))
    p.add_argument("--resolutions", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--ridge", type=float, default=0.1)
    p.add_argument("--second-lengthscale", type=float, default=None)
    p.add_argument("--noise-var", type=float, default=None)
    p.add_argument("--median-cap", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("cv", help="k-fold cross validation of one method")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=harness.METHODS)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--resolutions", default=None)
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--ridge", type=float, default=0.1)
    p.add_argument("--second-lengthscale", type=float, default=None)
    p.add_argument("--noise-var", type=float, default=None)
    _train_flags(p)
    p.set_defaults(func=_cmd_cv)

    p = sub.add_parser("check-grad", help="finite-difference check of the gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=2)
    p.add_argument("--regions", type=int, default=6)
    p.add_argument("--resolutions", type=int, default=2)
    p.add_argument("--trainable-z", action="store_true")
    p.add_argument("--noise-mode", choices=("plain", "weighted"), default="plain")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_check_grad)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, ResourceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
