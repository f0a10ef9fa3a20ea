from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from marrowbench.bootstrap import (BootstrapError, ClusteredSample, bca_interval, bias_correction, bootstrap_ci,
                                   bootstrap_ci_multi, hierarchical_resample, jackknife_acceleration,
                                   leave_one_out_values, normal_quantile)
from oracles import percentile_reference


def phi(z: float) -> float:
    # erfc keeps full relative precision in the lower tail
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def bisect_quantile(p: float) -> float:
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if phi(mid) < p else (lo, mid)
    return 0.5 * (lo + hi)


def mean_stat(s: ClusteredSample) -> float:
    return float(np.mean(s.items))


def clustered(rng, k=12, lo=1, hi=8, stat=mean_stat) -> ClusteredSample:
    groups = [(f"p{i:02d}", rng.normal(rng.normal(), 1.0, rng.integers(lo, hi + 1))) for i in range(k)]
    return ClusteredSample.from_groups(groups, stat)


class TestNormalQuantile:
    def test_centre_and_tail(self):
        assert normal_quantile(0.5) == 0.0
        assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)

    @given(st.floats(1e-12, 0.5))
    def test_against_bisection_and_antisymmetry(self, p):
        # the upper half is reached through 1 - p; p itself is then exact only
        # to float spacing near 1, so the oracle runs on the lower tail
        assert normal_quantile(p) == pytest.approx(bisect_quantile(p), abs=1e-9)
        assert normal_quantile(1 - p) == pytest.approx(-bisect_quantile(1 - (1 - p)), abs=1e-9)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            normal_quantile(p)


class TestResample:
    def test_single_item(self):
        s = ClusteredSample.from_groups([("a", [3.0])], mean_stat)
        r = hierarchical_resample(s, np.random.default_rng(0))
        assert r.items.tolist() == [3.0] and r.cluster_ids.tolist() == ["a"]

    def test_empty_rejected(self):
        with pytest.raises(BootstrapError):
            hierarchical_resample(ClusteredSample.from_groups([], mean_stat), np.random.default_rng(0))

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["two-level", "cluster"]))
    def test_containment(self, seed, mode):
        r0 = np.random.default_rng(seed)
        groups = [(f"c{i}", [float(i * 100 + j) for j in range(int(r0.integers(1, 5)))]) for i in range(6)]
        s = ClusteredSample.from_groups(groups, mean_stat)
        r = hierarchical_resample(s, np.random.default_rng(seed), mode)
        assert r.sizes.sum() == len(r.items) and r.n_clusters == s.n_clusters
        for cid, items in r.groups():
            assert len(items) == dict(s.groups())[cid].size
            assert set(items.tolist()) <= set(dict(s.groups())[cid].tolist())
            if mode == "cluster":
                assert items.tolist() == dict(s.groups())[cid].tolist()

    def test_exclusion_probability(self):
        n = 100
        s = ClusteredSample.from_groups([(f"c{i}", [float(i)]) for i in range(n)], mean_stat)
        rng = np.random.default_rng(5)
        absent = [1 - len(set(hierarchical_resample(s, rng).cluster_ids)) / n for _ in range(2000)]
        assert np.mean(absent) == pytest.approx((1 - 1 / n) ** n, abs=0.03)


class TestJackknife:
    def test_constant_statistic(self, rng):
        assert jackknife_acceleration(clustered(rng, stat=lambda s: 4.0)) == 0.0

    def test_symmetric_values(self):
        s = ClusteredSample.from_groups([(str(i), [v]) for i, v in enumerate([-2.0, -1.0, 0.0, 1.0, 2.0])], mean_stat)
        assert jackknife_acceleration(s) == pytest.approx(0.0, abs=1e-15)

    def test_five_cluster_formula(self):
        groups = [("a", [1.0, 2.0]), ("b", [7.0]), ("c", [0.5, 0.5, 3.0]), ("d", [10.0]), ("e", [2.0, 2.5])]
        s = ClusteredSample.from_groups(groups, mean_stat)
        loo = []
        for i in range(5):
            rest = [v for j, (_, vals) in enumerate(groups) if j != i for v in vals]
            loo.append(sum(rest) / len(rest))
        bar = sum(loo) / 5
        num = sum((bar - t) ** 3 for t in loo)
        den = 6 * sum((bar - t) ** 2 for t in loo) ** 1.5
        assert jackknife_acceleration(s) == pytest.approx(num / den, rel=1e-12)
        assert leave_one_out_values(s) == pytest.approx(loo)

    def test_needs_three_clusters(self):
        with pytest.raises(BootstrapError):
            jackknife_acceleration(ClusteredSample.from_groups([("a", [1.0]), ("b", [2.0])], mean_stat))


class TestBCaInterval:
    def test_hand_formula_twenty_replicates(self):
        reps = np.arange(1.0, 21.0)
        z0, a, alpha = 0.3, 0.05, 0.1
        zl, zu = bisect_quantile(alpha / 2), bisect_quantile(1 - alpha / 2)
        a1 = phi(z0 + (z0 + zl) / (1 - a * (z0 + zl)))
        a2 = phi(z0 + (z0 + zu) / (1 - a * (z0 + zu)))
        expected = (reps[math.ceil(a1 * 20) - 1], reps[math.ceil(a2 * 20) - 1])
        assert bca_interval(reps[::-1], 10.0, z0, a, alpha) == expected

    def test_constant_replicates(self):
        assert bca_interval([2.5] * 30, 2.5, 0.4, 0.1, 0.05) == (2.5, 2.5)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=300), st.sampled_from([0.01, 0.05, 0.1, 0.32]))
    def test_reduces_to_percentile(self, reps, alpha):
        assert bca_interval(reps, 0.0, 0.0, 0.0, alpha) == percentile_reference(reps, alpha)

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=100), st.floats(-1.5, 1.5), st.floats(-0.2, 0.2),
           st.floats(0.01, 0.5), st.floats(0.01, 0.5))
    def test_endpoints_are_members_and_nested(self, reps, z0, a, al1, al2):
        lo1, hi1 = bca_interval(reps, 0.0, z0, a, min(al1, al2))
        lo2, hi2 = bca_interval(reps, 0.0, z0, a, max(al1, al2))
        assert {lo1, hi1, lo2, hi2} <= set(reps)
        assert lo1 <= lo2 <= hi2 <= hi1

    # a 1/8 grid keeps exp injective in floating point
    @given(st.lists(st.integers(-24, 24), min_size=2, max_size=200), st.integers(-24, 24), st.floats(-0.2, 0.2))
    def test_transformation_respect_with_fixed_constants(self, ticks, theta_tick, a):
        reps, theta = np.array(ticks) / 8.0, theta_tick / 8.0
        z0 = bias_correction(reps, theta)
        assert bias_correction(np.exp(reps), np.exp(theta)) == z0
        lo, hi = bca_interval(reps, theta, z0, a, 0.05)
        assert bca_interval(np.exp(reps), np.exp(theta), z0, a, 0.05) == (np.exp(lo), np.exp(hi))


class TestBiasCorrection:
    def test_ties_excluded_and_clamped(self):
        reps = np.array([1.0] * 10)
        assert bias_correction(reps, 1.0) == pytest.approx(normal_quantile(1 / 20))
        assert bias_correction(reps, 5.0) == pytest.approx(normal_quantile(1 - 1 / 20))

    def test_half_below(self):
        assert bias_correction(np.arange(10.0), 4.5) == 0.0


class TestBootstrapCI:
    def test_constant_statistic(self, rng):
        res = bootstrap_ci(clustered(rng, stat=lambda s: 1.25), B=50)
        assert (res.point_estimate, res.lower, res.upper) == (1.25, 1.25, 1.25)

    def test_deterministic_and_thread_independent(self, rng):
        s = clustered(rng, k=15)
        r1 = bootstrap_ci(s, B=200, seed=9, keep_replicates=True)
        r2 = bootstrap_ci(s, B=200, seed=9, n_jobs=3, keep_replicates=True)
        assert r1 == r2 and np.array_equal(r1.replicates, r2.replicates)
        assert bootstrap_ci(s, B=200, seed=10) != r1

    def test_interval_contains_order_statistics(self, rng):
        res = bootstrap_ci(clustered(rng), B=300, keep_replicates=True)
        assert res.lower in res.replicates and res.upper in res.replicates and res.lower <= res.upper

    def test_dropped_replicates_counted(self, rng):
        s = clustered(rng, k=20)
        first = s.items[0]

        def stat(x):  # NaN whenever the first item is absent from a resample
            return float(np.mean(x.items)) if np.any(x.items == first) else float("nan")

        with pytest.raises(BootstrapError, match="non-finite"):
            bootstrap_ci(s.with_statistic(stat), B=100)

        def rarely_nan(x):  # NaN when cluster p00 is drawn 3+ times, about 7.5% of replicates
            return float("nan") if np.sum(x.cluster_ids == "p00") >= 3 else float(np.mean(x.items))

        res = bootstrap_ci(s.with_statistic(rarely_nan), B=200, seed=2)
        assert 0 < res.dropped <= 20

    @pytest.mark.parametrize("B", [0, 1])
    def test_minimum_B(self, rng, B):
        with pytest.raises(ValueError):
            bootstrap_ci(clustered(rng), B=B)

    def test_transformation_respect_of_replicates_and_z0(self, rng):
        s = clustered(rng, k=25)
        base = bootstrap_ci(s, B=400, seed=4, keep_replicates=True)
        tr = bootstrap_ci(s.with_statistic(lambda x: float(np.exp(mean_stat(x)))), B=400, seed=4, keep_replicates=True)
        assert tr.replicates.tolist() == [float(np.exp(v)) for v in base.replicates]
        assert tr.z0 == base.z0
        # the jackknife acceleration itself is not invariant under exp, so the
        # endpoints agree only up to the rank shift it induces
        ranks = np.sort(tr.replicates)
        i_lo, i_hi = (np.searchsorted(ranks, v) for v in (tr.lower, tr.upper))
        j_lo, j_hi = (np.searchsorted(np.sort(base.replicates), v) for v in (base.lower, base.upper))
        assert abs(i_lo - j_lo) <= 3 and abs(i_hi - j_hi) <= 3

    def test_multi_equals_scalar_per_component(self, rng):
        s = clustered(rng, k=10)
        vec = s.with_statistic(lambda x: np.array([np.mean(x.items), np.median(x.items), np.max(x.items)]))
        multi = bootstrap_ci_multi(vec, ["mean", "median", "max"], B=150, seed=3)
        for j, name in enumerate(["mean", "median", "max"]):
            scalar = bootstrap_ci(vec.with_statistic(lambda x, j=j: float(vec.statistic(x)[j])), B=150, seed=3)
            assert multi[name] == scalar
