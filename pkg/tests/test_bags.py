import json
import os

import numpy as np
import pytest

import oracles
from conftest import make_bag, random_regions
from agggp.bags import (
    Bag,
    Dataset,
    MultiResBag,
    aggregated_gram,
    aggregated_gram_diag,
    load_dataset,
    normalize_weights,
    write_dataset,
)
from agggp.errors import InputError
from agggp.kernels import KernelSpec


class TestNormalizeWeights:
    def test_uniform_default(self):
        np.testing.assert_allclose(normalize_weights(None, 4), np.full(4, 0.25))

    def test_sums_to_one(self, rng):
        raw = rng.uniform(0.1, 5.0, size=7)
        w = normalize_weights(raw)
        assert w.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(w, raw / raw.sum())

    @pytest.mark.parametrize("raw", [[-1.0, 2.0], [0.0, 0.0], [np.nan, 1.0]])
    def test_invalid(self, raw):
        with pytest.raises(InputError):
            normalize_weights(np.array(raw))


class TestBag:
    def test_requires_points(self):
        with pytest.raises(InputError):
            Bag("r", np.zeros((0, 2)), np.zeros(0))

    def test_requires_normalized_weights(self):
        with pytest.raises(InputError):
            Bag("r", np.zeros((2, 1)), np.array([0.9, 0.3]))

    def test_rejects_non_finite_points(self):
        with pytest.raises(InputError):
            Bag("r", np.array([[np.inf]]), np.array([1.0]))

    def test_1d_points_get_column_shape(self):
        b = Bag("r", np.array([1.0, 2.0]), np.array([0.5, 0.5]))
        assert b.points.shape == (2, 1)

    def test_label_flows_through_multires(self):
        b = make_bag("r", [[0.0]])
        m = MultiResBag("r", (b,), 3.5)
        assert m.label == 3.5


class TestAggregatedGram:
    @pytest.mark.parametrize("family", ["rbf", "matern32"])
    def test_matches_quadruple_loop(self, family, rng):
        spec = KernelSpec(family, 1.3, 0.8, 2)
        bags_a = [make_bag(f"a{i}", rng.normal(size=(rng.integers(1, 5), 2)))
                  for i in range(4)]
        bags_b = [make_bag(f"b{i}", rng.normal(size=(rng.integers(1, 4), 2)))
                  for i in range(3)]
        got = aggregated_gram(spec, bags_a, bags_b)
        want = oracles.agg_gram(family, 1.3, 0.8,
                                [(b.points, b.weights) for b in bags_a],
                                [(b.points, b.weights) for b in bags_b])
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)

    def test_symmetric_case_is_exactly_symmetric(self, rng):
        spec = KernelSpec("rbf", 1.0, 0.5, 2)
        bags = [make_bag(f"r{i}", rng.normal(size=(3, 2))) for i in range(5)]
        K = aggregated_gram(spec, bags)
        assert np.array_equal(K, K.T)

    def test_diag_matches_full(self, rng):
        spec = KernelSpec("matern32", 0.9, 0.6, 2)
        bags = [make_bag(f"r{i}", rng.normal(size=(4, 2))) for i in range(4)]
        np.testing.assert_allclose(aggregated_gram_diag(spec, bags),
                                   np.diag(aggregated_gram(spec, bags)),
                                   rtol=1e-12)

    def test_split_weight_invariance(self):
        # replicating a point and splitting its weight changes nothing
        spec = KernelSpec("rbf", 1.0, 1.0, 1)
        a = make_bag("a", [[0.0], [1.0]], [0.5, 0.5])
        a_split = make_bag("a", [[0.0], [0.0], [1.0]], [0.25, 0.25, 0.5])
        other = [make_bag("b", [[0.3]]), make_bag("c", [[2.0], [2.5]])]
        K1 = aggregated_gram(spec, [a], other)
        K2 = aggregated_gram(spec, [a_split], other)
        np.testing.assert_allclose(K1, K2, rtol=0, atol=1e-12)

    def test_singleton_bags_reduce_to_kernel(self):
        spec = KernelSpec("rbf", 2.0, 1.0, 1)
        K = aggregated_gram(spec, [make_bag("a", [[0.0]]), make_bag("b", [[2.0]])])
        assert K[0, 1] == pytest.approx(2.0 * np.exp(-2.0), rel=1e-14)


class TestDataset:
    def test_from_bags_round_trip(self, rng):
        regions = random_regions(6, (2, 3), rng)
        ds = Dataset.from_bags(regions, ["a", "b"])
        assert ds.n_regions == 6
        assert ds.resolution_names == ("a", "b")
        for i, r in enumerate(regions):
            got = ds.region(i)
            assert got.region_id == r.region_id
            assert got.label == r.label
            for l in range(2):
                np.testing.assert_array_equal(got.resolutions[l].points,
                                              r.resolutions[l].points)
                np.testing.assert_array_equal(got.resolutions[l].weights,
                                              r.resolutions[l].weights)

    def test_subset_keeps_order(self, rng):
        ds = Dataset.from_bags(random_regions(6, (2,), rng), ["a"])
        sub = ds.subset([4, 1])
        assert sub.region_ids == (ds.region_ids[4], ds.region_ids[1])
        np.testing.assert_array_equal(sub.labels,
                                      np.asarray(ds.labels)[[4, 1]])

    def test_select_resolutions(self, rng):
        ds = Dataset.from_bags(random_regions(4, (2, 1, 3), rng), ["a", "b", "c"])
        sel = ds.select_resolutions(["c", "a"])
        assert sel.resolution_names == ("c", "a")
        np.testing.assert_array_equal(sel.points_block(1), ds.points_block(0))
        with pytest.raises(InputError):
            ds.select_resolutions(["nope"])

    def test_centroids_are_weighted_means(self, rng):
        ds = Dataset.from_bags(random_regions(3, (2,), rng), ["a"])
        cds = ds.centroids()
        for i in range(3):
            b = ds.bag(i, 0)
            c = cds.bag(i, 0)
            assert c.n_points == 1
            np.testing.assert_allclose(c.points[0], b.weights @ b.points,
                                       rtol=1e-13)

    def test_mismatched_resolution_counts(self, rng):
        r1 = MultiResBag("a", (make_bag("a", [[0.0]]),), 1.0)
        r2 = MultiResBag("b", (make_bag("b", [[0.0]]), make_bag("b", [[1.0]])), 2.0)
        with pytest.raises(InputError):
            Dataset.from_bags([r1, r2])

    def test_partial_labels_rejected(self):
        r1 = MultiResBag("a", (make_bag("a", [[0.0]]),), 1.0)
        r2 = MultiResBag("b", (make_bag("b", [[1.0]]),), None)
        with pytest.raises(InputError):
            Dataset.from_bags([r1, r2])


class TestDatasetFiles:
    def _dataset(self, rng):
        return Dataset.from_bags(random_regions(5, (2, 1), rng), ["covA", "covB"])

    def test_write_load_round_trip(self, rng, tmp_path):
        ds = self._dataset(rng)
        man = write_dataset(ds, str(tmp_path))
        back = load_dataset(man)
        assert back.region_ids == ds.region_ids
        assert back.resolution_names == ds.resolution_names
        for l in range(2):
            np.testing.assert_array_equal(back.points_block(l), ds.points_block(l))
            # loading renormalizes explicit weights, which can move the last bit
            np.testing.assert_allclose(back.weights_block(l), ds.weights_block(l),
                                       rtol=0, atol=1e-15)
        np.testing.assert_array_equal(np.asarray(back.labels), np.asarray(ds.labels))

    def test_write_is_deterministic(self, rng, tmp_path):
        ds = self._dataset(rng)
        d1, d2 = tmp_path / "one", tmp_path / "two"
        write_dataset(ds, str(d1))
        write_dataset(ds, str(d2))
        for name in os.listdir(d1):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_empty_weight_fields_mean_uniform(self, tmp_path):
        (tmp_path / "r.csv").write_text(
            "region_id,weight,f0\na,,0.0\na,,1.0\nb,,2.0\n")
        man = tmp_path / "manifest.json"
        man.write_text(json.dumps(
            {"resolutions": [{"name": "r", "path": "r.csv", "dim": 1}]}))
        ds = load_dataset(str(man))
        np.testing.assert_allclose(ds.bag(0, 0).weights, [0.5, 0.5])
        np.testing.assert_allclose(ds.bag(1, 0).weights, [1.0])

    def test_explicit_weights_are_normalized(self, tmp_path):
        (tmp_path / "r.csv").write_text(
            "region_id,weight,f0\na,2,0.0\na,6,1.0\n")
        man = tmp_path / "manifest.json"
        man.write_text(json.dumps(
            {"resolutions": [{"name": "r", "path": "r.csv", "dim": 1}]}))
        ds = load_dataset(str(man))
        np.testing.assert_allclose(ds.bag(0, 0).weights, [0.25, 0.75])

    def test_mixed_weight_styles_rejected(self, tmp_path):
        (tmp_path / "r.csv").write_text(
            "region_id,weight,f0\na,0.5,0.0\na,,1.0\n")
        man = tmp_path / "manifest.json"
        man.write_text(json.dumps(
            {"resolutions": [{"name": "r", "path": "r.csv", "dim": 1}]}))
        with pytest.raises(InputError):
            load_dataset(str(man))

    def test_region_set_mismatch_rejected(self, tmp_path):
        (tmp_path / "a.csv").write_text("region_id,weight,f0\nx,,0.0\ny,,1.0\n")
        (tmp_path / "b.csv").write_text("region_id,weight,f0\nx,,0.0\nz,,1.0\n")
        man = tmp_path / "manifest.json"
        man.write_text(json.dumps({"resolutions": [
            {"name": "a", "path": "a.csv", "dim": 1},
            {"name": "b", "path": "b.csv", "dim": 1}]}))
        with pytest.raises(InputError):
            load_dataset(str(man))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(InputError):
            load_dataset(str(tmp_path / "nope.json"))

    def test_bad_header_rejected(self, tmp_path):
        (tmp_path / "r.csv").write_text("region,w,f0\na,1,0.0\n")
        man = tmp_path / "manifest.json"
        man.write_text(json.dumps(
            {"resolutions": [{"name": "r", "path": "r.csv", "dim": 1}]}))
        with pytest.raises(InputError):
            load_dataset(str(man))

    def test_labels_must_cover_regions(self, tmp_path):
        (tmp_path / "r.csv").write_text("region_id,weight,f0\na,,0.0\nb,,1.0\n")
        (tmp_path / "labels.csv").write_text("region_id,y\na,1.0\n")
        man = tmp_path / "manifest.json"
        man.write_text(json.dumps({
            "resolutions": [{"name": "r", "path": "r.csv", "dim": 1}],
            "labels": "labels.csv"}))
        with pytest.raises(InputError):
            load_dataset(str(man))

    def test_region_order_follows_first_resolution(self, tmp_path):
        (tmp_path / "a.csv").write_text("region_id,weight,f0\nq,,0.0\np,,1.0\n")
        (tmp_path / "b.csv").write_text("region_id,weight,f0\np,,0.0\nq,,1.0\n")
        man = tmp_path / "manifest.json"
        man.write_text(json.dumps({"resolutions": [
            {"name": "a", "path": "a.csv", "dim": 1},
            {"name": "b", "path": "b.csv", "dim": 1}]}))
        ds = load_dataset(str(man))
        assert ds.region_ids == ("q", "p")
        # second resolution rows are realigned to the canonical order
        assert ds.bag(0, 1).points[0, 0] == 1.0
