import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchbalance.clustering import kmeans_fit
from patchbalance.exceptions import ConfigError, InfeasibleError, ShapeError, StateError
from patchbalance.sampling import (
    DivergenceSampler,
    IntervalBuckets,
    allocate_budgets,
    balance_partition,
    dispersion_stats,
    interval_index,
    js_divergence,
    kl_divergence,
    make_buckets,
    stratified_sample,
    to_distribution,
)

LN2 = math.log(2.0)


def kl_loop(p, q):
    """Oracle: the divergence sum written out term by term."""
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def jsd_loop(p, q):
    m = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * kl_loop(p, m) + 0.5 * kl_loop(q, m)


class TestDistribution:
    def test_constant_vector_single_bin(self):
        p = to_distribution(np.zeros(4), n_bins=8, lo=-1.0, hi=1.0)
        assert int(np.argmax(p)) == 4  # 0 lies in [0, 0.25)
        assert p[4] > 1 - 1e-7
        assert abs(p.sum() - 1.0) < 1e-12

    def test_uniform_fill(self):
        n_bins = 10
        v = (np.arange(n_bins) + 0.5) / n_bins  # one component per bin
        p = to_distribution(v, n_bins=n_bins, lo=0.0, hi=1.0)
        np.testing.assert_allclose(p, 1.0 / n_bins, atol=1e-8)

    def test_single_bin_rejected(self):
        with pytest.raises(ConfigError):
            to_distribution(np.zeros(3), n_bins=1)


class TestDivergence:
    def test_kl_identity(self):
        p = np.array([0.2, 0.3, 0.5])
        assert kl_divergence(p, p) == 0.0

    def test_kl_hand_values(self):
        assert abs(kl_divergence([1.0, 0.0], [0.5, 0.5]) - LN2) < 1e-12
        expected = 0.5 * math.log(5 / 9) + 0.5 * math.log(5)
        assert abs(kl_divergence([0.5, 0.5], [0.9, 0.1]) - expected) < 1e-12
        assert abs(expected - 0.5108) < 1e-4

    def test_jsd_hand_values(self):
        assert js_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0
        assert abs(js_divergence([1.0, 0.0], [0.0, 1.0]) - LN2) < 1e-12

    def test_bin_mismatch(self):
        with pytest.raises(ShapeError):
            kl_divergence([0.5, 0.5], [1 / 3] * 3)

    def test_random_pairs_against_loop(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 12))
            p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
            assert abs(kl_divergence(p, q) - kl_loop(p, q)) < 1e-12
            assert abs(js_divergence(p, q) - jsd_loop(p, q)) < 1e-12
            assert js_divergence(p, q) == js_divergence(q, p)

    def test_vectorized_rows(self, rng):
        P = rng.dirichlet(np.ones(5), size=7)
        q = rng.dirichlet(np.ones(5))
        out = js_divergence(P, q[None, :])
        np.testing.assert_allclose(out, [jsd_loop(p, q) for p in P], atol=1e-12)


class TestDispersion:
    def test_identical_members(self):
        members = np.tile([0.1, 0.2, 0.3], (5, 1))
        s = dispersion_stats(members, members[0])
        assert np.all(s.dispersion == 0) and s.mean == 0.0
        assert s.degenerate and np.all(s.z == 0)

    def test_two_members_population_std(self):
        # euclidean dispersions 1 and 3 from the origin
        s = dispersion_stats([[1.0, 0.0], [0.0, 3.0]], [0.0, 0.0], mode="euclidean")
        assert s.mean == 2.0 and s.std == 1.0
        np.testing.assert_allclose(s.z, [-1.0, 1.0])

    def test_square_corners_equal_distances(self):
        corners = [[0, 0], [0, 1], [1, 0], [1, 1]]
        s = dispersion_stats(corners, [0.5, 0.5], mode="euclidean")
        np.testing.assert_allclose(s.dispersion, math.sqrt(0.5))
        assert np.all(s.z == 0)

    def test_empty_cluster(self):
        with pytest.raises(StateError):
            dispersion_stats(np.empty((0, 3)), np.zeros(3))

    def test_interval_clamping(self):
        idx = interval_index([-10.0, -3.0, -2.5, 0.0, 14.99, 40.0])
        assert idx.tolist() == [0, 0, 0, 3, 17, 17]


class TestStratifiedSample:
    def test_forced_draw(self):
        b = IntervalBuckets(-3, 15, {0: np.array([1]), 1: np.array([2]), 2: np.array([3])})
        out = stratified_sample(b, 3, 0)
        assert sorted(out.drawn.tolist()) == [1, 2, 3]

    def test_round_then_round_robin(self):
        b = IntervalBuckets(-3, 15, {0: np.arange(10), 1: np.arange(10, 20)})
        out = stratified_sample(b, 5, 0)
        assert len(out.drawn) == 5 and len(set(out.drawn.tolist())) == 5
        assert out.interval_counts[0] >= 2 and out.interval_counts[1] >= 2
        assert out.rounds == 1 and out.round_robin

    def test_zero_budget(self):
        b = IntervalBuckets(-3, 15, {0: np.arange(4)})
        assert len(stratified_sample(b, 0, 0).drawn) == 0

    def test_small_bucket_exhausted_then_others_fill(self):
        b = IntervalBuckets(-3, 15, {0: np.array([99]), 5: np.arange(20)})
        out = stratified_sample(b, 9, 1)
        assert out.interval_counts == {0: 1, 5: 8}

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 15), min_size=1, max_size=6),
           st.integers(0, 60), st.integers(0, 1000))
    def test_draw_properties(self, sizes, budget, seed):
        buckets, start = {}, 0
        for i, n in enumerate(sizes):
            buckets[i] = np.arange(start, start + n)
            start += n
        out = stratified_sample(IntervalBuckets(-3, 15, buckets), budget, seed)
        assert len(out.drawn) == min(budget, start)
        assert len(set(out.drawn.tolist())) == len(out.drawn)


class TestAllocate:
    def test_dispersion_weights(self):
        assert allocate_budgets(8, [1.0, 3.0], [100, 100]).tolist() == [2, 6]

    def test_capacity_redistribution(self):
        assert allocate_budgets(10, [1.0, 1.0], [2, 100]).tolist() == [2, 8]

    def test_tie_to_lower_index(self):
        assert allocate_budgets(5, [1, 1], [10, 10]).tolist() == [3, 2]

    def test_infeasible(self):
        with pytest.raises(InfeasibleError):
            allocate_budgets(11, [1, 1], [5, 5])

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 10), st.integers(0, 30)), min_size=1,
                    max_size=8), st.floats(0, 1))
    def test_sums_to_target(self, spec, share):
        weights = [w for w, _ in spec]
        caps = [c for _, c in spec]
        target = int(share * sum(caps))
        out = allocate_budgets(target, weights, caps)
        assert out.sum() == target
        assert np.all(out <= np.array(caps)) and np.all(out >= 0)


def clustered(rng, n, k, d=8):
    X = rng.normal(size=(n, d)) + rng.integers(0, 4, size=(n, 1)) * 3.0
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    m = kmeans_fit(X, k)
    return X, m


class TestBalancePartition:
    @pytest.mark.parametrize("weighting", ["dispersion", "equal"])
    @pytest.mark.parametrize("mode", ["jsd", "euclidean"])
    def test_hits_target(self, rng, weighting, mode):
        X, m = clustered(rng, 600, 5)
        ids = np.arange(1000, 1600)
        out, _ = balance_partition(X, ids, m.labels, m.centroids, 57,
                                   weighting=weighting, mode=mode)
        assert len(out.ids) == 57 and not out.shortfall
        assert set(out.ids.tolist()) <= set(ids.tolist())
        assert len(np.unique(out.ids)) == 57

    def test_saturation(self, rng):
        X, m = clustered(rng, 80, 4)
        out, _ = balance_partition(X, np.arange(80), m.labels, m.centroids, 80)
        assert out.ids.tolist() == list(range(80))

    def test_target_too_large(self, rng):
        X, m = clustered(rng, 30, 3)
        with pytest.raises(InfeasibleError):
            balance_partition(X, np.arange(30), m.labels, m.centroids, 31)

    def test_deterministic(self, rng):
        X, m = clustered(rng, 300, 4)
        a, _ = balance_partition(X, np.arange(300), m.labels, m.centroids, 40, seed=5)
        b, _ = balance_partition(X, np.arange(300), m.labels, m.centroids, 40, seed=5)
        np.testing.assert_array_equal(a.ids, b.ids)

    def test_audit_rows_account_for_draws(self, rng):
        X, m = clustered(rng, 300, 4)
        out, _ = balance_partition(X, np.arange(300), m.labels, m.centroids, 40)
        assert sum(r[3] for r in out.audit_rows()) == 40


def test_sampler_estimator(rng):
    X = rng.normal(size=(200, 6))
    y = np.r_[np.ones(20), np.zeros(180)].astype(int)
    Xr, yr = DivergenceSampler(n_clusters=4).fit_resample(X, y)
    assert (yr == 1).sum() == 20 and (yr == 0).sum() == 20
    assert len(Xr) == 40
