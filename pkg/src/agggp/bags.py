"""Bags of weighted points, multi-resolution regions, and dataset storage.

A *bag* is a finite set of points with nonnegative weights summing to one;
it stands in for a region whose label is observed only as an aggregate of a
latent function over those points. A :class:`MultiResBag` groups one bag
per covariate resolution for the same region (for example a coarse
satellite product, a finer one, and raw spatial coordinates), together
with the region's scalar label.

:class:`Dataset` stores a whole collection of regions column-wise per
resolution: one contiguous block of points per region plus an offsets
index, so per-region views and minibatch assembly never copy point data.

The aggregated kernel between bags ``(A, w)`` and ``(B, v)`` under a point
kernel ``k`` is ``w' k(A, B) v``; :func:`aggregated_gram` builds matrices
of such values, which is the basic object every model in this package
shares.

File format: a dataset directory holds one CSV per resolution with header
``region_id,weight,f0,...,f{d-1}``, an optional labels CSV with header
``region_id,y``, and a manifest JSON naming them. An empty weight field
means uniform weights over the bag (all rows of the bag must then leave it
empty); explicit weights are normalized to sum to one.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .ioutil import atomic_write_text, format_float
from . import kernels


def normalize_weights(raw=None, n: int | None = None) -> np.ndarray:
    """Normalize raw bag weights to sum to one.

    ``raw=None`` gives uniform weights over ``n`` points. Negative entries,
    non-finite entries, and a nonpositive total are hard errors.
    """
    if raw is None:
        if n is None or n < 1:
            raise InputError("uniform weights need the number of points")
        return np.full(n, 1.0 / n)
    w = np.asarray(raw, dtype=np.float64)
    if w.ndim != 1:
        raise InputError(f"weights must be 1-d, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InputError("weights contain non-finite values")
    if np.any(w < 0):
        raise InputError("weights must be nonnegative")
    total = float(w.sum())
    if total <= 0.0:
        raise InputError("bag has zero total weight")
    return w / total


@dataclass(frozen=True)
class Bag:
    """Weighted point set for one region at one resolution.

    ``points`` has shape (n_points, dim), ``weights`` shape (n_points,)
    with nonnegative entries summing to one (within 1e-9).
    """

    region_id: str
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if not isinstance(self.region_id, str) or not self.region_id:
            raise InputError(f"region_id must be a non-empty string, got {self.region_id!r}")
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InputError(f"bag {self.region_id!r}: points must be (n, d) with n >= 1")
        if not np.all(np.isfinite(pts)):
            raise InputError(f"bag {self.region_id!r}: points contain non-finite values")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (pts.shape[0],):
            raise InputError(
                f"bag {self.region_id!r}: weights shape {w.shape} does not match "
                f"{pts.shape[0]} points"
            )
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InputError(f"bag {self.region_id!r}: weights must be finite and nonnegative")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise InputError(
                f"bag {self.region_id!r}: weights sum to {w.sum()!r}, expected 1"
            )
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def centroid_features(bag: Bag) -> np.ndarray:
    """Weighted centroid of a bag, shape (dim,)."""
    return bag.weights @ bag.points


@dataclass(frozen=True)
class MultiResBag:
    """One region: a bag per resolution plus an optional scalar label."""

    region_id: str
    resolutions: tuple
    label: float | None = None

    def __post_init__(self):
        res = tuple(self.resolutions)
        if not res:
            raise InputError("a region needs at least one resolution")
        for bag in res:
            if not isinstance(bag, Bag):
                raise InputError("resolutions must contain Bag instances")
            if bag.region_id != self.region_id:
                raise InputError(
                    f"bag region_id {bag.region_id!r} does not match region "
                    f"{self.region_id!r}"
                )
        lab = self.label
        if lab is not None:
            lab = float(lab)
            if not np.isfinite(lab):
                raise InputError(f"region {self.region_id!r}: label is not finite")
        object.__setattr__(self, "resolutions", res)
        object.__setattr__(self, "label", lab)

    @property
    def n_resolutions(self) -> int:
        return len(self.resolutions)


def bags_at_resolution(regions, index: int) -> list:
    """The single-resolution bag list ``[region.resolutions[index], ...]``."""
    return [r.resolutions[index] for r in regions]


def check_regions(regions, kernel_specs=None, require_labels: bool = False):
    """Validate a region list for model fitting.

    Ensures a consistent resolution count, point dimensions matching the
    kernel specs (when given), and labels (when required). Returns the
    region list and the specs as a tuple.
    """
    regions = list(regions)
    if not regions:
        raise InputError("need at least one region")
    d = regions[0].n_resolutions
    if kernel_specs is not None:
        kernel_specs = tuple(kernel_specs)
        if len(kernel_specs) != d:
            raise InputError(f"{len(kernel_specs)} kernel specs for {d} resolutions")
    for r in regions:
        if r.n_resolutions != d:
            raise InputError(
                f"region {r.region_id!r} has {r.n_resolutions} resolutions, expected {d}"
            )
        if kernel_specs is not None:
            for l, spec in enumerate(kernel_specs):
                if r.resolutions[l].dim != spec.input_dim:
                    raise InputError(
                        f"region {r.region_id!r} resolution {l}: dimension "
                        f"{r.resolutions[l].dim} does not match kernel input_dim "
                        f"{spec.input_dim}"
                    )
        if require_labels and r.label is None:
            raise InputError(f"region {r.region_id!r} has no label")
    return regions, kernel_specs


def _stack(bag_list) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    points = np.concatenate([b.points for b in bag_list], axis=0)
    weights = np.concatenate([b.weights for b in bag_list])
    offsets = np.zeros(len(bag_list) + 1, dtype=np.int64)
    np.cumsum([b.n_points for b in bag_list], out=offsets[1:])
    return points, weights, offsets


def aggregated_gram(spec: kernels.KernelSpec, bags_a, bags_b=None) -> np.ndarray:
    """Matrix of aggregated kernel values ``w_i' k(X_i, X_j) v_j``.

    Parameters
    ----------
    spec : KernelSpec
    bags_a : sequence of Bag
    bags_b : sequence of Bag, optional
        Defaults to ``bags_a``, in which case the result is symmetrized
        exactly.

    Returns
    -------
    ndarray, shape (len(bags_a), len(bags_b))
    """
    bags_a = list(bags_a)
    if not bags_a:
        raise InputError("aggregated_gram needs at least one bag")
    symmetric = bags_b is None
    bags_b = bags_a if symmetric else list(bags_b)
    if not bags_b:
        raise InputError("aggregated_gram needs at least one bag")
    Xa, wa, off_a = _stack(bags_a)
    Xb, wb, off_b = _stack(bags_b)
    K = kernels.gram(spec, Xa, Xb)
    K *= wa[:, None]
    rows = np.add.reduceat(K, off_a[:-1], axis=0)
    rows *= wb[None, :]
    out = np.add.reduceat(rows, off_b[:-1], axis=1)
    if symmetric:
        out = 0.5 * (out + out.T)
    return out


def aggregated_gram_diag(spec: kernels.KernelSpec, bag_list) -> np.ndarray:
    """Per-bag self values ``w_i' k(X_i, X_i) w_i``.

    The diagonal of :func:`aggregated_gram` without the off-diagonal work.
    """
    bag_list = list(bag_list)
    out = np.empty(len(bag_list))
    for i, b in enumerate(bag_list):
        K = kernels.gram(spec, b.points, b.points)
        out[i] = float(b.weights @ K @ b.weights)
    return out


class Dataset:
    """Multi-resolution bag collection with contiguous per-region blocks.

    Point rows for each resolution live in one array; an offsets index maps
    region ``i`` to its slice, so :meth:`bag` returns views. Region order is
    fixed at construction and shared across resolutions and labels.
    """

    def __init__(self, resolution_names, points, weights, offsets, region_ids,
                 labels=None):
        self.resolution_names = tuple(str(n) for n in resolution_names)
        if len(set(self.resolution_names)) != len(self.resolution_names):
            raise InputError("duplicate resolution names")
        if not self.resolution_names:
            raise InputError("dataset needs at least one resolution")
        self.region_ids = tuple(str(r) for r in region_ids)
        if len(set(self.region_ids)) != len(self.region_ids):
            raise InputError("duplicate region ids")
        n = len(self.region_ids)
        if n == 0:
            raise InputError("dataset has no regions")
        self._points = [np.ascontiguousarray(p, dtype=np.float64) for p in points]
        self._weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self._offsets = [np.asarray(o, dtype=np.int64) for o in offsets]
        if not (len(self._points) == len(self._weights) == len(self._offsets)
                == len(self.resolution_names)):
            raise InputError("per-resolution arrays do not match resolution names")
        for l, (p, w, o) in enumerate(zip(self._points, self._weights, self._offsets)):
            if o.shape != (n + 1,) or o[0] != 0 or o[-1] != p.shape[0]:
                raise InputError(f"resolution {l}: offsets do not index the point block")
            if np.any(np.diff(o) < 1):
                raise InputError(f"resolution {l}: every region needs at least one point")
            if w.shape != (p.shape[0],):
                raise InputError(f"resolution {l}: weights do not match points")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.float64)
            if labels.shape != (n,):
                raise InputError(f"labels shape {labels.shape} does not match {n} regions")
            if not np.all(np.isfinite(labels)):
                raise InputError("labels contain non-finite values")
        self.labels = labels

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    @property
    def n_resolutions(self) -> int:
        return len(self.resolution_names)

    @property
    def dims(self) -> tuple:
        return tuple(p.shape[1] for p in self._points)

    def points_block(self, resolution: int) -> np.ndarray:
        return self._points[resolution]

    def weights_block(self, resolution: int) -> np.ndarray:
        return self._weights[resolution]

    def offsets(self, resolution: int) -> np.ndarray:
        return self._offsets[resolution]

    def resolution_index(self, name: str) -> int:
        try:
            return self.resolution_names.index(name)
        except ValueError:
            raise InputError(
                f"unknown resolution {name!r}; dataset has {self.resolution_names}"
            ) from None

    def bag(self, region: int, resolution: int) -> Bag:
        o = self._offsets[resolution]
        sl = slice(o[region], o[region + 1])
        return Bag(
            region_id=self.region_ids[region],
            points=self._points[resolution][sl],
            weights=self._weights[resolution][sl],
        )

    def region(self, i: int) -> MultiResBag:
        return MultiResBag(
            region_id=self.region_ids[i],
            resolutions=tuple(self.bag(i, l) for l in range(self.n_resolutions)),
            label=None if self.labels is None else float(self.labels[i]),
        )

    def bags(self) -> list:
        return [self.region(i) for i in range(self.n_regions)]

    def subset(self, indices) -> "Dataset":
        """New dataset containing the given regions, in the given order."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 1 or len(indices) == 0:
            raise InputError("subset needs a non-empty 1-d index array")
        if np.any(indices < 0) or np.any(indices >= self.n_regions):
            raise InputError("subset index out of range")
        points, weights, offsets = [], [], []
        for l in range(self.n_resolutions):
            o = self._offsets[l]
            pts = [self._points[l][o[i]:o[i + 1]] for i in indices]
            wts = [self._weights[l][o[i]:o[i + 1]] for i in indices]
            counts = np.array([p.shape[0] for p in pts], dtype=np.int64)
            off = np.zeros(len(indices) + 1, dtype=np.int64)
            np.cumsum(counts, out=off[1:])
            points.append(np.concatenate(pts, axis=0))
            weights.append(np.concatenate(wts))
            offsets.append(off)
        return Dataset(
            self.resolution_names, points, weights, offsets,
            [self.region_ids[i] for i in indices],
            None if self.labels is None else self.labels[indices],
        )

    def select_resolutions(self, names) -> "Dataset":
        """New dataset keeping only the named resolutions, in the given order."""
        idx = [self.resolution_index(n) for n in names]
        if not idx:
            raise InputError("select_resolutions needs at least one name")
        return Dataset(
            [self.resolution_names[l] for l in idx],
            [self._points[l] for l in idx],
            [self._weights[l] for l in idx],
            [self._offsets[l] for l in idx],
            self.region_ids,
            self.labels,
        )

    def centroids(self) -> "Dataset":
        """Dataset with every bag collapsed to its single weighted centroid."""
        points, weights, offsets = [], [], []
        n = self.n_regions
        for l in range(self.n_resolutions):
            o = self._offsets[l]
            w = self._weights[l]
            p = self._points[l]
            cent = np.empty((n, p.shape[1]))
            for i in range(n):
                sl = slice(o[i], o[i + 1])
                cent[i] = w[sl] @ p[sl]
            points.append(cent)
            weights.append(np.ones(n))
            offsets.append(np.arange(n + 1, dtype=np.int64))
        return Dataset(self.resolution_names, points, weights, offsets,
                       self.region_ids, self.labels)

    @staticmethod
    def from_bags(regions, resolution_names=None) -> "Dataset":
        """Build a dataset from a list of :class:`MultiResBag`."""
        regions = list(regions)
        if not regions:
            raise InputError("no regions given")
        d = regions[0].n_resolutions
        if any(r.n_resolutions != d for r in regions):
            raise InputError("regions disagree on the number of resolutions")
        if resolution_names is None:
            resolution_names = [f"res{l}" for l in range(d)]
        points, weights, offsets = [], [], []
        for l in range(d):
            bl = [r.resolutions[l] for r in regions]
            p, w, o = _stack(bl)
            points.append(p)
            weights.append(w)
            offsets.append(o)
        labels = [r.label for r in regions]
        has = [lab is not None for lab in labels]
        if any(has) and not all(has):
            raise InputError("either all regions carry labels or none do")
        return Dataset(
            resolution_names, points, weights, offsets,
            [r.region_id for r in regions],
            np.array(labels, dtype=np.float64) if all(has) else None,
        )


# ---------------------------------------------------------------------------
# Dataset files


def _resolution_header(dim: int) -> list:
    return ["region_id", "weight"] + [f"f{j}" for j in range(dim)]


def _read_csv_rows(path: str) -> list:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _load_resolution_csv(path: str, dim: int):
    rows = _read_csv_rows(path)
    if not rows:
        raise InputError(f"{path}: empty file")
    expected = _resolution_header(dim)
    if rows[0] != expected:
        raise InputError(
            f"{path}: header {rows[0]!r} does not match expected {expected!r}"
        )
    by_region: dict = {}
    order = []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != len(expected):
            raise InputError(f"{path}:{ln}: expected {len(expected)} fields, got {len(row)}")
        rid = row[0]
        if not rid:
            raise InputError(f"{path}:{ln}: empty region_id")
        wfield = row[1].strip()
        try:
            weight = None if wfield == "" else float(wfield)
            feats = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise InputError(f"{path}:{ln}: {exc}") from exc
        if rid not in by_region:
            by_region[rid] = ([], [])
            order.append(rid)
        by_region[rid][0].append(feats)
        by_region[rid][1].append(weight)
    bags = {}
    for rid in order:
        feats, wts = by_region[rid]
        pts = np.asarray(feats, dtype=np.float64)
        explicit = [w for w in wts if w is not None]
        if explicit and len(explicit) != len(wts):
            raise InputError(
                f"{path}: bag {rid!r} mixes empty and explicit weight fields"
            )
        w = normalize_weights(None if not explicit else np.asarray(explicit),
                              n=len(wts))
        bags[rid] = Bag(region_id=rid, points=pts, weights=w)
    return bags, order


def load_dataset(manifest_path: str) -> Dataset:
    """Read a dataset directory through its manifest JSON.

    The manifest lists the per-resolution CSV files (with their point
    dimensions) and, optionally, the labels CSV. All resolutions must cover
    exactly the same region ids; region order follows the first resolution
    file.
    """
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "resolutions" not in manifest:
        raise InputError(f"{manifest_path}: manifest must have a 'resolutions' list")
    entries = manifest["resolutions"]
    if not isinstance(entries, list) or not entries:
        raise InputError(f"{manifest_path}: 'resolutions' must be a non-empty list")
    base = os.path.dirname(os.path.abspath(manifest_path))
    names, per_res, canonical = [], [], None
    for e in entries:
        try:
            name, path, dim = e["name"], e["path"], int(e["dim"])
        except (TypeError, KeyError) as exc:
            raise InputError(
                f"{manifest_path}: each resolution needs 'name', 'path', 'dim'"
            ) from exc
        bags, order = _load_resolution_csv(os.path.join(base, path), dim)
        names.append(name)
        per_res.append(bags)
        if canonical is None:
            canonical = order
        elif set(order) != set(canonical):
            missing = sorted(set(canonical) ^ set(order))
            raise InputError(
                f"resolution {name!r} covers different regions (mismatch on "
                f"{missing[:5]}{'...' if len(missing) > 5 else ''})"
            )
    lab = None
    if manifest.get("labels"):
        lpath = os.path.join(base, manifest["labels"])
        rows = _read_csv_rows(lpath)
        if not rows or rows[0] != ["region_id", "y"]:
            raise InputError(f"{lpath}: expected header region_id,y")
        lab = {}
        for ln, row in enumerate(rows[1:], start=2):
            if len(row) != 2:
                raise InputError(f"{lpath}:{ln}: expected 2 fields")
            if row[0] in lab:
                raise InputError(f"{lpath}:{ln}: duplicate label for {row[0]!r}")
            try:
                lab[row[0]] = float(row[1])
            except ValueError as exc:
                raise InputError(f"{lpath}:{ln}: {exc}") from exc
        if set(lab) != set(canonical):
            missing = sorted(set(canonical) ^ set(lab))
            raise InputError(
                f"labels cover different regions (mismatch on "
                f"{missing[:5]}{'...' if len(missing) > 5 else ''})"
            )
    regions = []
    for rid in canonical:
        regions.append(MultiResBag(
            region_id=rid,
            resolutions=tuple(per_res[l][rid] for l in range(len(names))),
            label=None if lab is None else lab[rid],
        ))
    return Dataset.from_bags(regions, resolution_names=names)


def write_dataset(ds: Dataset, out_dir: str, manifest_name: str = "manifest.json") -> str:
    """Write a dataset directory (per-resolution CSVs, labels, manifest).

    Files are written atomically. Weights are written explicitly (already
    normalized). Returns the manifest path.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for l, name in enumerate(ds.resolution_names):
        fname = f"{name}.csv"
        sio = io.StringIO()
        w = csv.writer(sio, lineterminator="\n")
        dim = ds.dims[l]
        w.writerow(_resolution_header(dim))
        off = ds.offsets(l)
        pts = ds.points_block(l)
        wts = ds.weights_block(l)
        for i, rid in enumerate(ds.region_ids):
            for j in range(off[i], off[i + 1]):
                w.writerow([rid, format_float(wts[j])]
                           + [format_float(v) for v in pts[j]])
        atomic_write_text(os.path.join(out_dir, fname), sio.getvalue())
        entries.append({"name": name, "path": fname, "dim": int(dim)})
    manifest = {"resolutions": entries}
    if ds.labels is not None:
        sio = io.StringIO()
        w = csv.writer(sio, lineterminator="\n")
        w.writerow(["region_id", "y"])
        for rid, y in zip(ds.region_ids, ds.labels):
            w.writerow([rid, format_float(y)])
        atomic_write_text(os.path.join(out_dir, "labels.csv"), sio.getvalue())
        manifest["labels"] = "labels.csv"
    mpath = os.path.join(out_dir, manifest_name)
    atomic_write_text(mpath, json.dumps(manifest, indent=2) + "\n")
    return mpath
