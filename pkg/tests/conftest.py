import numpy as np
import pytest

from agggp.bags import Bag, Dataset, MultiResBag


def make_bag(rid, points, weights=None):
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if weights is None:
        weights = np.full(points.shape[0], 1.0 / points.shape[0])
    return Bag(rid, points, np.asarray(weights, dtype=float))


def random_regions(n_regions, dims, rng, labeled=True, max_points=5):
    """Random multi-resolution regions with non-uniform weights."""
    regions = []
    for i in range(n_regions):
        bags = []
        for d in dims:
            m = int(rng.integers(1, max_points + 1))
            pts = rng.normal(size=(m, d))
            w = rng.uniform(0.2, 1.0, size=m)
            bags.append(Bag(f"r{i}", pts, w / w.sum()))
        label = float(rng.normal()) if labeled else None
        regions.append(MultiResBag(f"r{i}", tuple(bags), label))
    return regions


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_dataset(rng):
    regions = random_regions(8, (2, 1), rng)
    return Dataset.from_bags(regions, resolution_names=["covA", "covB"])
