import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vfagg.clustering import (
    cluster_slopes,
    cluster_spatial,
    kmeans,
    kmeans_1d,
    normalize_rows,
    patient_feature,
)
from vfagg.core import PatientSeries


def make_series(pid, dates, values):
    return PatientSeries(pid, dates, values)


def line_series(pid, slope_vec, intercept=-10.0, dates=(0.0, 1.0, 2.0)):
    dates = np.asarray(dates)
    slope_vec = np.asarray(slope_vec, dtype=float)
    values = intercept + np.outer(dates, slope_vec)
    return PatientSeries(pid, dates, np.clip(values, -30.0, 0.0))


class TestPatientFeature:
    def test_two_point_exact_slope(self):
        s = make_series("p", [0.0, 2.0], [[0.0], [-4.0]])
        assert patient_feature(s)[0] == pytest.approx(-2.0, rel=1e-12)

    def test_constant_series_zero_slope(self):
        s = make_series("p", [0.0, 1.0, 2.0], [[-3.0]] * 3)
        assert patient_feature(s)[0] == 0.0

    def test_three_point_ols(self):
        s = make_series("p", [0.0, 1.0, 2.0], [[0.0], [-1.0], [-4.0]])
        assert patient_feature(s)[0] == pytest.approx(-2.0, rel=1e-10)


class TestKMeans:
    def test_single_cluster_center_is_mean(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]])
        result = kmeans(pts, 1, seed=0)
        assert np.allclose(result.centers[0], pts.mean(axis=0))
        assert result.labels.tolist() == [0, 0, 0]

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(60, 4))
        result = kmeans(pts, 5, seed=1)
        history = np.array(result.objective_history)
        assert np.all(np.diff(history) <= 1e-9)

    def test_bit_reproducible(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(40, 3))
        a = kmeans(pts, 4, seed=99)
        b = kmeans(pts, 4, seed=99)
        assert np.array_equal(a.centers, b.centers)
        assert np.array_equal(a.labels, b.labels)
        assert a.objective == b.objective

    def test_duplicate_points_tie_break_to_lowest_index(self):
        pts = np.zeros((6, 2))
        result = kmeans(pts, 2, seed=0, restarts=2, max_iter=5)
        assert np.all(result.labels == 0)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError, match="positive"):
            kmeans(np.zeros((3, 2)), 0, seed=0)
        with pytest.raises(ValueError, match="cannot split"):
            kmeans(np.zeros((2, 2)), 3, seed=0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_objective_non_increasing_random(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(25, 3))
        result = kmeans(pts, 3, seed=seed, restarts=2)
        history = np.array(result.objective_history)
        assert np.all(np.diff(history) <= 1e-9)


class TestClusterSpatial:
    def test_k1_center_is_mean_feature(self):
        cohort = [
            line_series("a", [-1.0, 0.0]),
            line_series("b", [0.0, -1.0]),
        ]
        spatial = cluster_spatial(cohort, 1, min_size=1, seed=0)
        feats = normalize_rows(np.stack([patient_feature(s) for s in cohort]))
        assert np.allclose(spatial.centers[0], feats.mean(axis=0))
        assert set(spatial.assignments.values()) == {0}
        assert spatial.retained == frozenset({0})

    def test_min_size_exclusion(self):
        # 5 patients on one pattern, 2 on another: the pair falls below
        # the default min size of 3.
        cohort = [line_series(f"a{i}", [-1.0, 0.0, 0.0]) for i in range(5)]
        cohort += [line_series(f"b{i}", [0.0, 0.0, -1.0]) for i in range(2)]
        spatial = cluster_spatial(cohort, 2, min_size=3, seed=0)
        sizes = spatial.cluster_sizes()
        assert sorted(sizes.values()) == [2, 5]
        big = max(sizes, key=sizes.get)
        assert spatial.retained == frozenset({big})

    def test_retained_cover_plus_dropped_covers_cohort(self):
        rng = np.random.default_rng(0)
        cohort = [
            line_series(f"p{i}", rng.uniform(-2, 0, size=4)) for i in range(20)
        ]
        spatial = cluster_spatial(cohort, 4, min_size=3, seed=1)
        assert len(spatial.assignments) == 20
        assert set(spatial.assignments) == {s.patient_id for s in cohort}

    def test_reproducible(self):
        rng = np.random.default_rng(8)
        cohort = [
            line_series(f"p{i}", rng.uniform(-2, 0, size=6)) for i in range(30)
        ]
        a = cluster_spatial(cohort, 3, min_size=3, seed=42)
        b = cluster_spatial(cohort, 3, min_size=3, seed=42)
        assert a.assignments == b.assignments
        assert np.array_equal(a.centers, b.centers)

    def test_cohort_smaller_than_k_rejected(self):
        cohort = [line_series("a", [-1.0]), line_series("b", [-2.0])]
        with pytest.raises(ValueError, match="cannot fill"):
            cluster_spatial(cohort, 3, min_size=1, seed=0)


class TestKMeans1d:
    def test_matches_brute_force_optimum(self):
        rng = np.random.default_rng(17)
        for trial in range(20):
            n = int(rng.integers(4, 12))
            k = int(rng.integers(2, min(4, n) + 1))
            values = rng.uniform(-5, 0, size=n)
            result = kmeans_1d(values, k, seed=trial)
            best_sse, _ = brute_force_1d_partition(values, k)
            assert result.objective == pytest.approx(best_sse, rel=1e-8, abs=1e-10)

    def test_labels_consistent_with_centers(self):
        rng = np.random.default_rng(3)
        values = rng.uniform(-4, 0, size=40)
        result = kmeans_1d(values, 3, seed=1)
        centers = result.centers[:, 0]
        assert np.all(np.diff(centers) >= 0)
        for i, v in enumerate(values):
            dists = np.abs(v - centers)
            assert dists[result.labels[i]] == pytest.approx(dists.min(), abs=1e-12)

    def test_objective_history_non_increasing(self):
        rng = np.random.default_rng(5)
        values = rng.uniform(-4, 0, size=200)
        result = kmeans_1d(values, 5, seed=2)
        assert np.all(np.diff(np.array(result.objective_history)) <= 1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        values = rng.uniform(-4, 0, size=100)
        a = kmeans_1d(values, 4, seed=9)
        b = kmeans_1d(values, 4, seed=9)
        assert np.array_equal(a.centers, b.centers)
        assert np.array_equal(a.labels, b.labels)


def brute_force_1d_partition(values, c):
    """Minimal within-group SSE over contiguous partitions of sorted values."""
    values = np.sort(np.asarray(values, dtype=float))
    n = values.shape[0]
    best = (np.inf, None)
    for cuts in itertools.combinations(range(1, n), c - 1):
        bounds = [0, *cuts, n]
        sse = 0.0
        means = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            grp = values[a:b]
            means.append(grp.mean())
            sse += float(np.sum((grp - grp.mean()) ** 2))
        if sse < best[0]:
            best = (sse, means)
    return best


class TestClusterSlopes:
    def test_c1_single_rate_is_mean(self):
        members = [
            line_series("a", [-1.0, -3.0]),
            line_series("b", [-2.0, -4.0]),
        ]
        ss = cluster_slopes(members, 1, seed=0)
        pooled = np.concatenate([patient_feature(s) for s in members])
        assert ss.rates.shape == (1,)
        assert ss.rates[0] == pytest.approx(pooled.mean(), rel=1e-10)

    def test_exact_when_distinct_at_most_c(self):
        members = [
            line_series("a", [-1.0, -5.0]),
            line_series("b", [-5.0, -1.0]),
        ]
        ss = cluster_slopes(members, 2, seed=0)
        assert sorted(ss.rates.tolist()) == pytest.approx([-5.0, -1.0])
        for s in members:
            recon = ss.rates[ss.point_assignment[s.patient_id]]
            assert np.allclose(recon, patient_feature(s), atol=1e-12)

    def test_two_group_quantization_matches_enumeration(self):
        # pooled slopes {-1,-1,-1,-5,-5} -> optimal 2-partition {-1},{-5}
        members = [
            line_series("a", [-1.0, -1.0, -1.0, -5.0, -5.0]),
        ]
        ss = cluster_slopes(members, 2, seed=0)
        sse, means = brute_force_1d_partition([-1, -1, -1, -5, -5], 2)
        assert sorted(ss.rates.tolist()) == pytest.approx(sorted(means))
        assert ss.rates.tolist() == pytest.approx([-5.0, -1.0])

    def test_kmeans_path_matches_enumeration(self):
        rng = np.random.default_rng(11)
        slopes = rng.uniform(-3, 0, size=7)
        members = [line_series("a", slopes)]
        ss = cluster_slopes(members, 3, seed=5)
        pooled = patient_feature(members[0])
        sse, means = brute_force_1d_partition(pooled, 3)
        got_sse = float(
            np.sum((pooled - ss.rates[ss.point_assignment["a"]]) ** 2)
        )
        assert got_sse == pytest.approx(sse, rel=1e-8, abs=1e-12)

    def test_rates_ascending_and_bounded_by_c(self):
        rng = np.random.default_rng(2)
        members = [line_series(f"p{i}", rng.uniform(-3, 0, size=9)) for i in range(4)]
        ss = cluster_slopes(members, 4, seed=3)
        assert ss.rates.shape[0] <= 4
        assert np.all(np.diff(ss.rates) > 0)

    def test_empty_members_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            cluster_slopes([], 2, seed=0)

    def test_invalid_c_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            cluster_slopes([line_series("a", [-1.0])], 0, seed=0)
