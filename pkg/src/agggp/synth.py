"""Synthetic aggregated-output datasets with known ground truth.

Regions are the cells of an r x c grid over the unit square. Each region
gets ``N_l`` uniform-random pixel locations per resolution. A resolution is
either ``"spatial"`` (the covariates are the locations themselves, always
2-d) or ``"covariate"`` (the locations pass through a smooth random
sinusoid mixture into ``dim`` feature channels, mimicking a gridded
product observed at that resolution). Each resolution carries its own
ground-truth kernel; the latent function values at all of a resolution's
points are drawn *jointly* from the exact Gaussian prior via Cholesky
factorization, so recovery experiments have a true oracle. Labels average
each latent over the region's points, sum across resolutions, and add iid
Gaussian noise:

    y_i = sum_l mean_j f_l(x_ilj) + eps_i,   eps_i ~ N(0, sigma^2)

``sigma`` is either given directly (``noise_std``) or as a fraction of the
realized signal standard deviation (``noise_std_fraction``).

Determinism: one RNG seeded from the config drives, in order, (1) the
sinusoid parameters of covariate resolutions in resolution order, (2) the
pixel locations per resolution, (3) the latent draw per resolution
(resolutions with scale 0 skip their draw and contribute exact zeros),
(4) the label noise. The same config therefore yields identical files.

Joint draws cost a dense Cholesky in the total point count of each
resolution, so ``max_points_per_resolution`` guards against accidental
huge instances; raise it deliberately for large experiments. The factor
is computed in place on a Fortran-ordered matrix to keep the peak at one
matrix of memory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels
from .bags import Dataset
from .errors import InputError, NumericalError, ResourceError
from .ioutil import atomic_write_text

KINDS = ("covariate", "spatial")

_FILL_BLOCK = 2048


@dataclass(frozen=True)
class ResolutionConfig:
    """Ground-truth description of one resolution.

    ``scale`` may be zero, meaning the resolution contributes no latent
    signal (its covariates are still generated).
    """

    name: str
    kind: str
    dim: int
    points_per_region: int
    family: str
    scale: float
    lengthscale: float

    def __post_init__(self):
        if not self.name:
            raise InputError("resolution needs a name")
        if self.kind not in KINDS:
            raise InputError(f"unknown resolution kind {self.kind!r}; expected {KINDS}")
        if self.kind == "spatial" and self.dim != 2:
            raise InputError("spatial resolutions have dim 2")
        if self.dim < 1:
            raise InputError(f"dim must be >= 1, got {self.dim}")
        if self.points_per_region < 1:
            raise InputError(f"points_per_region must be >= 1, got {self.points_per_region}")
        if self.family not in kernels.FAMILIES:
            raise InputError(f"unknown kernel family {self.family!r}")
        if not (math.isfinite(self.scale) and self.scale >= 0):
            raise InputError(f"scale must be finite and >= 0, got {self.scale!r}")
        if not (math.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise InputError(f"lengthscale must be finite and > 0, got {self.lengthscale!r}")

    def kernel(self) -> kernels.KernelSpec:
        if self.scale <= 0:
            raise InputError(f"resolution {self.name!r} has zero scale, no kernel")
        return kernels.KernelSpec(family=self.family, scale=self.scale,
                                  lengthscale=self.lengthscale, input_dim=self.dim)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "kind": self.kind, "dim": int(self.dim),
            "points_per_region": int(self.points_per_region),
            "family": self.family, "scale": float(self.scale),
            "lengthscale": float(self.lengthscale),
        }

    @staticmethod
    def from_dict(d: dict) -> "ResolutionConfig":
        try:
            return ResolutionConfig(
                name=str(d["name"]), kind=str(d["kind"]), dim=int(d["dim"]),
                points_per_region=int(d["points_per_region"]),
                family=str(d["family"]), scale=float(d["scale"]),
                lengthscale=float(d["lengthscale"]),
            )
        except KeyError as exc:
            raise InputError(f"resolution config missing field {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class SynthConfig:
    """Full generator configuration."""

    grid: tuple
    resolutions: tuple
    seed: int = 0
    noise_std: float | None = None
    noise_std_fraction: float | None = None
    max_points_per_resolution: int = 5000

    def __post_init__(self):
        grid = tuple(int(g) for g in self.grid)
        if len(grid) != 2 or grid[0] < 1 or grid[1] < 1:
            raise InputError(f"grid must be (rows, cols) with positive entries, got {self.grid!r}")
        res = tuple(self.resolutions)
        if not res:
            raise InputError("config needs at least one resolution")
        names = [r.name for r in res]
        if len(set(names)) != len(names):
            raise InputError("duplicate resolution names")
        given = [v is not None for v in (self.noise_std, self.noise_std_fraction)]
        if sum(given) != 1:
            raise InputError("set exactly one of noise_std, noise_std_fraction")
        for v in (self.noise_std, self.noise_std_fraction):
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise InputError(f"noise level must be finite and >= 0, got {v!r}")
        if self.max_points_per_resolution < 1:
            raise InputError("max_points_per_resolution must be >= 1")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "resolutions", res)

    @property
    def n_regions(self) -> int:
        return self.grid[0] * self.grid[1]

    def to_dict(self) -> dict:
        return {
            "grid": [int(self.grid[0]), int(self.grid[1])],
            "seed": int(self.seed),
            "noise_std": None if self.noise_std is None else float(self.noise_std),
            "noise_std_fraction": (None if self.noise_std_fraction is None
                                   else float(self.noise_std_fraction)),
            "max_points_per_resolution": int(self.max_points_per_resolution),
            "resolutions": [r.to_dict() for r in self.resolutions],
        }

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        try:
            return SynthConfig(
                grid=tuple(d["grid"]),
                resolutions=tuple(ResolutionConfig.from_dict(r) for r in d["resolutions"]),
                seed=int(d.get("seed", 0)),
                noise_std=d.get("noise_std"),
                noise_std_fraction=d.get("noise_std_fraction"),
                max_points_per_resolution=int(d.get("max_points_per_resolution", 5000)),
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"invalid synth config: {exc}") from exc


def load_config(path) -> SynthConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return SynthConfig.from_dict(json.load(fh))
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from exc


@dataclass
class SynthResult:
    """Generator output: the dataset, ground truth, and raw locations."""

    dataset: Dataset
    ground_truth: dict
    locations: list
    noise_std: float
    manifest_path: str | None = None


def _sinusoid_map(rng: np.random.Generator, dim: int):
    """Random smooth map from the unit square into ``dim`` channels.

    Each channel mixes three sinusoids with 0.5 to 2 cycles across the
    domain, so features vary on scales no finer than half the square.
    """
    freqs = rng.uniform(0.5, 2.0, size=(dim, 3, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(dim, 3))
    amps = rng.uniform(0.5, 1.0, size=(dim, 3)) * np.array([1.0, 0.7, 0.5])

    def apply(locations: np.ndarray) -> np.ndarray:
        out = np.empty((locations.shape[0], dim))
        for j in range(dim):
            acc = np.zeros(locations.shape[0])
            for m in range(3):
                acc += amps[j, m] * np.sin(
                    2.0 * np.pi * (locations @ freqs[j, m]) + phases[j, m])
            out[:, j] = acc
        return out

    return apply


def _fill_gram(spec: kernels.KernelSpec, X: np.ndarray, out: np.ndarray) -> None:
    for i0 in range(0, X.shape[0], _FILL_BLOCK):
        i1 = min(i0 + _FILL_BLOCK, X.shape[0])
        out[i0:i1, :] = kernels.gram(spec, X[i0:i1], X)


def sample_gp(spec: kernels.KernelSpec, X: np.ndarray,
              rng: np.random.Generator) -> np.ndarray:
    """Exact joint draw of a GP at the given points.

    Factors the Gram in place (Fortran order) so the peak memory is a
    single n x n matrix. The diagonal jitter starts at 1e-8 of the kernel
    scale and escalates if the factorization fails; draws consume the RNG
    before factoring, so the escalation never shifts the random stream.
    """
    n = X.shape[0]
    z = rng.standard_normal(n)
    try:
        K = np.empty((n, n), order="F")
    except MemoryError as exc:
        raise ResourceError(
            f"cannot allocate a {n} x {n} covariance for the joint draw"
        ) from exc
    for jitter in (1e-8, 1e-6, 1e-4):
        _fill_gram(spec, X, K)
        K.flat[:: n + 1] += jitter * spec.scale
        try:
            scipy.linalg.cholesky(K, lower=True, overwrite_a=True, check_finite=False)
        except scipy.linalg.LinAlgError:
            continue
        return scipy.linalg.blas.dtrmm(1.0, K, z.reshape(-1, 1), side=0, lower=1)[:, 0]
    raise NumericalError(
        f"prior covariance at {n} points is not positive definite even with "
        f"jitter 1e-4 * scale"
    )


def generate(config: SynthConfig, out_dir: str | None = None) -> SynthResult:
    """Generate a dataset (and optionally write it plus ground_truth.json).

    Returns a :class:`SynthResult`; when ``out_dir`` is given the dataset
    directory and ``ground_truth.json`` are written there and the manifest
    path is filled in.
    """
    rows, cols = config.grid
    n = config.n_regions
    for rc in config.resolutions:
        total = n * rc.points_per_region
        if total > config.max_points_per_resolution:
            raise ResourceError(
                f"resolution {rc.name!r} needs {total} points, over the cap "
                f"{config.max_points_per_resolution}; raise max_points_per_resolution "
                f"to generate deliberately large instances"
            )
    rng = np.random.default_rng(config.seed)
    width = max(3, len(str(n - 1)))
    region_ids = [f"r{i:0{width}d}" for i in range(n)]

    maps = {}
    for rc in config.resolutions:
        if rc.kind == "covariate":
            maps[rc.name] = _sinusoid_map(rng, rc.dim)

    locations = []
    for rc in config.resolutions:
        N = rc.points_per_region
        u = rng.uniform(size=(n, N, 2))
        col = (np.arange(n) % cols)[:, None]
        row = (np.arange(n) // cols)[:, None]
        lon = (col + u[:, :, 0]) / cols
        lat = (row + u[:, :, 1]) / rows
        locations.append(np.stack([lon, lat], axis=2).reshape(n * N, 2))

    covariates = []
    for l, rc in enumerate(config.resolutions):
        if rc.kind == "spatial":
            covariates.append(locations[l].copy())
        else:
            covariates.append(maps[rc.name](locations[l]))

    latents = []
    for l, rc in enumerate(config.resolutions):
        if rc.scale <= 0.0:
            latents.append(np.zeros(covariates[l].shape[0]))
        else:
            latents.append(sample_gp(rc.kernel(), covariates[l], rng))

    signal = np.zeros(n)
    for l, rc in enumerate(config.resolutions):
        N = rc.points_per_region
        signal += latents[l].reshape(n, N).mean(axis=1)

    if config.noise_std is not None:
        sigma = float(config.noise_std)
    else:
        sigma = float(config.noise_std_fraction) * float(np.std(signal))
    y = signal + sigma * rng.standard_normal(n)

    points, weights, offsets = [], [], []
    for l, rc in enumerate(config.resolutions):
        N = rc.points_per_region
        points.append(covariates[l])
        weights.append(np.full(n * N, 1.0 / N))
        offsets.append(np.arange(n + 1, dtype=np.int64) * N)
    ds = Dataset([rc.name for rc in config.resolutions], points, weights, offsets,
                 region_ids, labels=y)

    gt_latents = []
    for l, rc in enumerate(config.resolutions):
        vals = latents[l].reshape(n, rc.points_per_region)
        for i, rid in enumerate(region_ids):
            gt_latents.append({
                "resolution": rc.name,
                "region_id": rid,
                "values": [float(v) for v in vals[i]],
            })
    ground_truth = {
        "hyperparams": {
            "seed": int(config.seed),
            "grid": [rows, cols],
            "noise_std": sigma,
            "resolutions": [rc.to_dict() for rc in config.resolutions],
        },
        "latents": gt_latents,
    }

    manifest_path = None
    if out_dir is not None:
        from .bags import write_dataset

        manifest_path = write_dataset(ds, out_dir)
        atomic_write_text(
            f"{out_dir}/ground_truth.json", json.dumps(ground_truth, indent=2) + "\n")
    return SynthResult(dataset=ds, ground_truth=ground_truth, locations=locations,
                       noise_std=sigma, manifest_path=manifest_path)
