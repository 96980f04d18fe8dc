from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.stats as ss
from hypothesis import given, settings
from hypothesis import strategies as st

from segkit import stats
from segkit.oracles import (
    brute_midranks,
    direct_kruskal_h,
    direct_spearman,
    ecdf_ks_distance,
    enumerate_signed_rank_p,
    linear_percentile,
    permutation_rank_sum_p,
    python_bootstrap_means,
)

small_ints = st.lists(st.integers(-6, 6), min_size=1, max_size=10)


# --- midranks ----------------------------------------------------------------


def test_midranks_examples():
    assert stats.midranks([10, 20, 30]).tolist() == [1, 2, 3]
    assert stats.midranks([5, 5]).tolist() == [1.5, 1.5]


@given(st.lists(st.integers(-5, 5), min_size=1, max_size=40))
def test_midranks_oracle_and_sum(x):
    r = stats.midranks(x)
    assert r.tolist() == brute_midranks(x)
    n = len(x)
    assert r.sum() == n * (n + 1) / 2


def test_nan_rejected():
    with pytest.raises(ValueError):
        stats.midranks([1.0, float("nan")])


# --- spearman ----------------------------------------------------------------


def test_spearman_monotone():
    assert stats.spearman([1, 2, 3], [1, 4, 9]).r_s == 1.0
    assert stats.spearman([1, 2, 3], [9, 4, 1]).r_s == -1.0


@settings(max_examples=60)
@given(st.integers(3, 30).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 5), min_size=n, max_size=n), st.lists(st.integers(0, 5), min_size=n, max_size=n))))
def test_spearman_tied_oracle(xy):
    x, y = xy
    if len(set(x)) < 2 or len(set(y)) < 2:
        with pytest.raises(ValueError, match="undefined"):
            stats.spearman(x, y)
        return
    r = stats.spearman(x, y)
    ref = direct_spearman(x, y)
    if abs(ref) < 1 - 1e-12:
        assert abs(r.r_s - ref) <= 1e-12
    assert 0 <= r.p_value <= 1


def test_spearman_p_against_scipy():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    y = y + 0.3 * x
    res = stats.spearman(x, y)
    ref = ss.spearmanr(x, y)
    assert res.r_s == pytest.approx(ref.statistic, abs=1e-12)
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-9)


# --- signed rank -------------------------------------------------------------


def test_signed_rank_examples():
    r = stats.wilcoxon_signed_rank([1, 2, 3])
    assert r.statistic == 6 and r.p_value == 0.25
    assert stats.wilcoxon_signed_rank([0, 0, 0]).p_value == 1.0


@settings(max_examples=80)
@given(small_ints)
def test_signed_rank_exact_vs_enumeration(d):
    r = stats.wilcoxon_signed_rank(d)
    assert r.p_value == enumerate_signed_rank_p(d)
    assert stats.wilcoxon_signed_rank([-v for v in d]).p_value == r.p_value


def test_signed_rank_normal_branch_against_scipy():
    rng = np.random.default_rng(1)
    d = rng.normal(0.3, 1, 60)
    r = stats.wilcoxon_signed_rank(d)
    ref = ss.wilcoxon(d, method="approx", correction=True)
    assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)


# --- rank sum ----------------------------------------------------------------


def test_rank_sum_separation():
    r = stats.mann_whitney_u([1, 2], [3, 4])
    assert r.statistic == 0 and r.extra["u_y"] == 4
    assert r.p_value == pytest.approx(1 / 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=1, max_size=8), st.lists(st.integers(0, 10), min_size=1, max_size=8))
def test_rank_sum_vs_permutation(x, y):
    r = stats.mann_whitney_u(x, y)
    assert r.statistic + r.extra["u_y"] == len(x) * len(y)
    if len(x) + len(y) <= 12:
        assert abs(r.p_value - permutation_rank_sum_p(x, y)) <= 0.02


def test_rank_sum_large_against_scipy():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=30), rng.normal(0.5, 1, 25)
    r = stats.mann_whitney_u(x, y)
    ref = ss.mannwhitneyu(x, y, method="asymptotic", use_continuity=True)
    assert r.statistic == ref.statistic
    assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_mann_whitney_z_sign():
    assert stats.mann_whitney_z([1, 2, 3], [7, 8, 9]) < 0 < stats.mann_whitney_z([7, 8, 9], [1, 2, 3])


# --- kruskal wallis ----------------------------------------------------------


def test_kruskal_separated():
    r = stats.kruskal_wallis([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
    assert r.statistic == pytest.approx(7.2, abs=1e-12)
    assert r.p_value == pytest.approx(ss.kruskal([1, 2, 3], [4, 5, 6], [7, 8, 9]).pvalue, rel=1e-12)


def test_kruskal_constant():
    r = stats.kruskal_wallis([[3, 3], [3, 3, 3]])
    assert r.statistic == 0 and r.p_value == 1


@settings(max_examples=50)
@given(st.lists(st.lists(st.integers(0, 9), min_size=1, max_size=6), min_size=2, max_size=5))
def test_kruskal_oracle_and_order(groups):
    pooled = [v for g in groups for v in g]
    if len(set(pooled)) < 2:
        return
    r = stats.kruskal_wallis(groups)
    assert r.statistic == pytest.approx(max(direct_kruskal_h(groups), 0.0), abs=1e-9)
    assert stats.kruskal_wallis(groups[::-1]).statistic == pytest.approx(r.statistic, abs=1e-9)


# --- KS ----------------------------------------------------------------------


def test_ks_quantile_grid():
    from statistics import NormalDist

    q = [NormalDist().inv_cdf((i - 0.5) / 100) for i in range(1, 101)]
    assert abs(stats.ks_normality(q).statistic - ecdf_ks_distance(q)) <= 1e-10


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.floats(-100, 100), st.floats(0.01, 100))
def test_ks_location_scale_invariant(seed, loc, scale):
    x = np.random.default_rng(seed).normal(size=30)
    a = stats.ks_normality(x).statistic
    b = stats.ks_normality(loc + scale * x).statistic
    assert a == pytest.approx(b, abs=1e-9)


def test_ks_power_grows_with_n():
    ps = [stats.ks_normality(np.random.default_rng(5).uniform(size=n)).p_value for n in (20, 200, 2000)]
    assert ps[0] > ps[1] > ps[2]


def test_kolmogorov_sf_against_scipy():
    for lam in (0.2, 0.5, 0.9, 1.17, 1.19, 1.5, 2.5):
        assert stats.kolmogorov_sf(lam) == pytest.approx(ss.kstwobign.sf(lam), abs=1e-12)


def test_ks_needs_variance():
    with pytest.raises(ValueError):
        stats.ks_normality([1, 1, 1, 1, 1])


# --- bootstrap ---------------------------------------------------------------


def test_bootstrap_constant():
    assert stats.bootstrap_percentile_ci([0.1] * 65, iterations=500) == (0.1, 0.1)


def test_bootstrap_matches_loop():
    x = list(np.random.default_rng(3).normal(size=15))
    lo, hi = stats.bootstrap_percentile_ci(x, iterations=1000, seed=9)
    ref = python_bootstrap_means(x, 1000, 9, stats.iteration_rng)
    assert lo == pytest.approx(linear_percentile(ref, 2.5), abs=1e-12)
    assert hi == pytest.approx(linear_percentile(ref, 97.5), abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_bootstrap_contains_mean(seed):
    x = np.random.default_rng(seed).exponential(size=40)
    lo, hi = stats.bootstrap_percentile_ci(x, iterations=2000, seed=seed)
    assert lo <= x.mean() <= hi


def test_bootstrap_width_scales():
    rng = np.random.default_rng(4)
    small, big = rng.normal(size=50), rng.normal(size=5000)
    w1 = np.subtract(*stats.bootstrap_percentile_ci(small, iterations=2000)[::-1])
    w2 = np.subtract(*stats.bootstrap_percentile_ci(big, iterations=2000)[::-1])
    assert 5 < w1 / w2 < 20  # ~sqrt(100)


def test_bootstrap_threads_bit_identical():
    x = np.random.default_rng(6).normal(size=65)
    assert stats.bootstrap_percentile_ci(x, threads=1) == stats.bootstrap_percentile_ci(x, threads=8)


def test_bootstrap_custom_statistic():
    x = np.arange(21.0)
    lo, hi = stats.bootstrap_percentile_ci(x, stat=np.median, iterations=300)
    assert lo <= 10 <= hi


def test_chunking_covers_range():
    assert stats.chunked(2500, 1000) == [(0, 1000), (1000, 2000), (2000, 2500)]


# --- quartiles ---------------------------------------------------------------


def test_quartiles_small():
    _, q = stats.quartile_split([1, 2, 3, 4])
    assert sorted(q.tolist()) == [1, 2, 3, 4]


def test_quartiles_uniform_ages():
    ages = np.random.default_rng(7).uniform(18, 100, 20000)
    scheme, q = stats.quartile_split(ages)
    # qualitatively near 41 / 59 / 78
    assert np.allclose(scheme.boundaries, (38.5, 59.0, 79.5), atol=2.0)
    assert np.bincount(q, minlength=5)[1:].min() > 4900


@given(st.lists(st.floats(0, 120), min_size=4, max_size=60))
def test_quartiles_partition(ages):
    b = np.percentile(ages, [25, 50, 75])
    if len(set(ages)) < 4 or not (b[0] < b[1] < b[2]):
        with pytest.raises(ValueError):
            stats.quartile_split(ages)
        return
    scheme, q = stats.quartile_split(ages)
    assert q.shape == (len(ages),) and set(q.tolist()) <= {1, 2, 3, 4}
    b = scheme.boundaries
    for a, k in zip(ages, q):
        assert (a < b[0]) == (k == 1)
        assert (a >= b[2]) == (k == 4)


def test_significance_threshold():
    assert stats.significant(0.99e-4) and not stats.significant(1e-4)


def test_tails():
    assert stats.normal_sf(0) == 0.5
    assert stats.student_t_sf(2.0, 10) == pytest.approx(ss.t.sf(2.0, 10), rel=1e-12)
    assert stats.student_t_sf(-2.0, 10) == pytest.approx(ss.t.sf(-2.0, 10), rel=1e-12)
    assert stats.chi2_sf(7.2, 2) == pytest.approx(math.exp(-3.6), rel=1e-12)
