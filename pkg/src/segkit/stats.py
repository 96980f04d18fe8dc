"""Nonparametric statistics used by evaluation and the aging analysis.

Conventions
-----------
* Ranks are midranks (ties share the average rank).
* Signed-rank: zero differences are dropped before ranking (Wilcoxon's
  convention, not Pratt's).  Exact two-sided p by enumeration of the sign
  distribution when the effective n is at most ``SIGNED_RANK_EXACT_MAX_N``;
  beyond that a normal approximation with tie and continuity corrections.
* Rank-sum (Mann-Whitney): exact permutation p when both samples have at most
  ``RANK_SUM_EXACT_MAX_N`` values, otherwise normal approximation with tie and
  continuity corrections.
* Two-sided p values are ``min(1, 2 * smaller tail)`` for the signed-rank test
  and ``P(|S - E[S]| >= |s - E[S]|)`` for the exact rank-sum test.
* Bootstrap: iteration ``i`` draws from its own PCG64 stream seeded with
  ``SeedSequence(seed, spawn_key=(i,))``.  Results therefore do not depend on
  how iterations are split across threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

SIGNED_RANK_EXACT_MAX_N = 20
RANK_SUM_EXACT_MAX_N = 8
SIGNIFICANCE_LEVEL = 0.05
BONFERRONI_THRESHOLD = 1e-4


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n: tuple[int, ...]
    method_note: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    __test__ = False  # not a pytest class


@dataclass(frozen=True)
class SpearmanResult:
    r_s: float
    p_value: float
    n: int
    method_note: str = ""


@dataclass(frozen=True)
class QuartileScheme:
    boundaries: tuple[float, float, float]

    def __post_init__(self):
        b = self.boundaries
        if not (b[0] < b[1] < b[2]):
            raise ValueError(f"quartile boundaries must be strictly increasing, got {b}")

    def assign(self, values) -> np.ndarray:
        """Quartile number 1..4: v < b1 -> 1, b1 <= v < b2 -> 2, b2 <= v < b3 -> 3, else 4."""
        return np.searchsorted(np.asarray(self.boundaries), np.asarray(values, dtype=float), side="right") + 1


def _clip_p(p: float) -> float:
    return float(min(1.0, max(0.0, p)))


def _as_array(x, name="x") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if np.isnan(a).any():
        raise ValueError(f"{name} contains NaN")
    return a


# --------------------------------------------------------------------------
# distribution tails


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def student_t_sf(t: float, df: float) -> float:
    """Upper tail of Student's t via the regularized incomplete beta."""
    if t == math.inf:
        return 0.0
    tail = 0.5 * float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return tail if t >= 0 else 1.0 - tail


def chi2_sf(x: float, df: float) -> float:
    """Upper tail of chi-square via the regularized upper incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def kolmogorov_sf(lam: float) -> float:
    """P(K > lam) for the limiting Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # Jacobi theta form converges fast for small lam
        s = 0.0
        c = math.pi**2 / (8.0 * lam * lam)
        for k in range(1, 20):
            s += math.exp(-((2 * k - 1) ** 2) * c)
        return _clip_p(1.0 - math.sqrt(2.0 * math.pi) / lam * s)
    s = 0.0
    for k in range(1, 101):
        term = math.exp(-2.0 * k * k * lam * lam)
        s += term if k % 2 else -term
        if term < 1e-300:
            break
    return _clip_p(2.0 * s)


# --------------------------------------------------------------------------
# ranks and tests


def midranks(x: Sequence[float]) -> np.ndarray:
    a = _as_array(x)
    if a.size == 0:
        raise ValueError("midranks of an empty sequence")
    order = np.argsort(a, kind="mergesort")
    s = a[order]
    # boundaries of tie blocks in sorted order
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks starts+1..ends
    ranks = np.empty(a.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _tie_sizes(a: np.ndarray) -> np.ndarray:
    _, counts = np.unique(a, return_counts=True)
    return counts


def spearman(x: Sequence[float], y: Sequence[float]) -> SpearmanResult:
    """Spearman's rank correlation with a two-sided t-approximation p."""
    xa, ya = _as_array(x, "x"), _as_array(y, "y")
    if xa.size != ya.size:
        raise ValueError(f"length mismatch: {xa.size} vs {ya.size}")
    n = xa.size
    if n < 3:
        raise ValueError("spearman needs at least 3 pairs")
    rx, ry = midranks(xa) - (n + 1) / 2.0, midranks(ya) - (n + 1) / 2.0
    sxx, syy = float(rx @ rx), float(ry @ ry)
    if sxx == 0 or syy == 0:
        raise ValueError("spearman undefined: zero rank variance (all values tied)")
    r = float(rx @ ry) / math.sqrt(sxx * syy)
    if abs(r) >= 1.0 - 1e-12:
        return SpearmanResult(math.copysign(1.0, r), 0.0, n, "exact monotone")
    df = n - 2
    t = r * math.sqrt(df / (1.0 - r * r))
    p = 2.0 * student_t_sf(abs(t), df)
    return SpearmanResult(r, _clip_p(p), n, f"t-approximation, df={df}")


def _count_subset_sums(weights: np.ndarray) -> np.ndarray:
    """counts[s] = number of subsets of integer ``weights`` summing to s."""
    total = int(weights.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for w in weights:
        w = int(w)
        if w:
            counts[w:] = counts[w:] + counts[:-w].copy()
        else:
            counts *= 2
    return counts


def wilcoxon_signed_rank(d: Sequence[float], exact_max_n: int = SIGNED_RANK_EXACT_MAX_N) -> TestResult:
    """Two-sided Wilcoxon signed-rank test on paired differences."""
    a = _as_array(d, "d")
    if a.size == 0:
        raise ValueError("signed-rank test needs at least one difference")
    nz = a[a != 0]
    n = nz.size
    note = "zeros dropped (Wilcoxon)"
    if n == 0:
        return TestResult(0.0, 1.0, (0,), note + "; no non-zero differences")
    ranks = midranks(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    if n <= exact_max_n:
        # doubled midranks are integers
        w2 = np.rint(2 * ranks).astype(np.int64)
        counts = _count_subset_sums(w2)
        s = int(round(2 * w_plus))
        upper = int(counts[s:].sum())
        lower = int(counts[: s + 1].sum())
        p = min(1.0, 2.0 * min(upper, lower) / float(2**n))
        return TestResult(w_plus, p, (n,), note + "; exact enumeration")
    mean = n * (n + 1) / 4.0
    t = _tie_sizes(np.abs(nz))
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((t**3 - t).sum()) / 48.0
    if var <= 0:
        return TestResult(w_plus, 1.0, (n,), note + "; zero variance")
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return TestResult(w_plus, _clip_p(2.0 * normal_sf(z)), (n,), note + "; normal approximation, continuity+tie corrected", {"z": z})


def _rank_sum_parts(x, y):
    xa, ya = _as_array(x, "x"), _as_array(y, "y")
    if xa.size == 0 or ya.size == 0:
        raise ValueError("rank-sum test needs two non-empty samples")
    joint = np.concatenate([xa, ya])
    ranks = midranks(joint)
    return xa.size, ya.size, joint, ranks


def mann_whitney_z(x: Sequence[float], y: Sequence[float], continuity: bool = True) -> float:
    """Signed, tie-corrected normal score of U_x."""
    nx, ny, joint, ranks = _rank_sum_parts(x, y)
    n = nx + ny
    u_x = float(ranks[:nx].sum()) - nx * (nx + 1) / 2.0
    t = _tie_sizes(joint)
    var = nx * ny / 12.0 * ((n + 1) - float((t**3 - t).sum()) / (n * (n - 1)))
    if var <= 0:
        return 0.0
    dev = u_x - nx * ny / 2.0
    if continuity:
        dev = math.copysign(max(abs(dev) - 0.5, 0.0), dev)
    return dev / math.sqrt(var)


def mann_whitney_u(x: Sequence[float], y: Sequence[float], exact_max_n: int = RANK_SUM_EXACT_MAX_N) -> TestResult:
    """Two-sided Wilcoxon rank-sum / Mann-Whitney U test. ``statistic`` is U_x."""
    nx, ny, joint, ranks = _rank_sum_parts(x, y)
    n = nx + ny
    r_x = float(ranks[:nx].sum())
    u_x = r_x - nx * (nx + 1) / 2.0
    u_y = nx * ny - u_x
    extra = {"u_y": u_y}
    if nx <= exact_max_n and ny <= exact_max_n:
        # distribution of the doubled rank sum of nx items drawn from all n ranks
        w2 = np.rint(2 * ranks).astype(np.int64)
        total = int(w2.sum())
        ways = np.zeros((nx + 1, total + 1), dtype=np.int64)
        ways[0, 0] = 1
        for w in w2:
            w = int(w)
            for j in range(nx, 0, -1):
                ways[j, w:] += ways[j - 1, : total + 1 - w]
        dist = ways[nx]
        centre2 = nx * (n + 1)  # 2 * E[R_x]
        obs = abs(int(round(2 * r_x)) - centre2)
        s = np.arange(total + 1)  # doubled rank sums
        extreme = np.abs(s - centre2) >= obs
        p = float(dist[extreme].sum()) / float(dist.sum())
        return TestResult(u_x, _clip_p(p), (nx, ny), "exact permutation distribution", extra)
    t = _tie_sizes(joint)
    var = nx * ny / 12.0 * ((n + 1) - float((t**3 - t).sum()) / (n * (n - 1)))
    if var <= 0:
        return TestResult(u_x, 1.0, (nx, ny), "all values tied", extra)
    z = max(abs(u_x - nx * ny / 2.0) - 0.5, 0.0) / math.sqrt(var)
    extra["z"] = z
    return TestResult(u_x, _clip_p(2.0 * normal_sf(z)), (nx, ny), "normal approximation, continuity+tie corrected", extra)


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> TestResult:
    """Tie-corrected Kruskal-Wallis H with a chi-square (k-1) p value."""
    arrays = [_as_array(g, "group") for g in groups]
    if len(arrays) < 2:
        raise ValueError("kruskal_wallis needs at least two groups")
    if any(a.size == 0 for a in arrays):
        raise ValueError("kruskal_wallis groups must be non-empty")
    sizes = [a.size for a in arrays]
    joint = np.concatenate(arrays)
    n = joint.size
    ranks = midranks(joint)
    bounds = np.cumsum([0] + sizes)
    h = 12.0 / (n * (n + 1)) * sum(
        float(ranks[bounds[i] : bounds[i + 1]].sum()) ** 2 / sizes[i] for i in range(len(sizes))
    ) - 3.0 * (n + 1)
    t = _tie_sizes(joint)
    c = 1.0 - float((t**3 - t).sum()) / (n**3 - n) if n > 1 else 0.0
    k = len(arrays)
    if c <= 0:
        return TestResult(0.0, 1.0, tuple(sizes), "all values tied")
    h = max(h / c, 0.0)
    return TestResult(h, chi2_sf(h, k - 1), tuple(sizes), f"chi-square approximation, df={k - 1}, tie corrected")


def ks_normality(x: Sequence[float]) -> TestResult:
    """One-sample KS distance to a normal fitted by sample mean and SD."""
    a = _as_array(x)
    n = a.size
    if n < 5:
        raise ValueError("ks_normality needs at least 5 values")
    sd = float(a.std(ddof=1))
    if sd == 0:
        raise ValueError("ks_normality undefined: zero variance")
    z = np.sort((a - a.mean()) / sd)
    cdf = 0.5 * special.erfc(-z / math.sqrt(2.0))
    i = np.arange(1, n + 1)
    d = float(max((i / n - cdf).max(), (cdf - (i - 1) / n).max()))
    p = kolmogorov_sf(math.sqrt(n) * d)
    return TestResult(
        d, p, (n,),
        "asymptotic Kolmogorov p; parameters estimated from the sample, so p is conservative (Lilliefors)",
    )


def significant(p: float, threshold: float = BONFERRONI_THRESHOLD) -> bool:
    return p < threshold


# --------------------------------------------------------------------------
# bootstrap


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(iteration,))))


def bootstrap_indices(n: int, seed: int, start: int, stop: int) -> np.ndarray:
    """Resample indices for iterations ``start..stop-1``; shape (stop-start, n)."""
    out = np.empty((stop - start, n), dtype=np.intp)
    for row, it in enumerate(range(start, stop)):
        out[row] = iteration_rng(seed, it).integers(0, n, size=n)
    return out


def chunked(iterations: int, chunk: int = 1000) -> list[tuple[int, int]]:
    return [(s, min(s + chunk, iterations)) for s in range(0, iterations, chunk)]


def bootstrap_replicates(
    n: int,
    statistic: Callable[[np.ndarray], np.ndarray],
    iterations: int,
    seed: int,
    threads: int = 1,
    chunk: int = 1000,
) -> np.ndarray:
    """Run ``statistic`` on index blocks; returns the concatenated replicates.

    ``statistic`` receives an (m, n) index array and returns m values (or an
    (m, ...) array).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    blocks = chunked(iterations, chunk)

    def run(b):
        return np.asarray(statistic(bootstrap_indices(n, seed, *b)))

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    return np.concatenate(parts, axis=0)


def percentile_interval(replicates: np.ndarray, level: float = 0.95, axis: int = 0):
    alpha = (1.0 - level) / 2.0
    lo, hi = np.nanpercentile(replicates, [100 * alpha, 100 * (1 - alpha)], axis=axis)
    return lo, hi


def bootstrap_percentile_ci(
    x: Sequence[float],
    stat: Callable[[np.ndarray], float] | str = "mean",
    iterations: int = 10000,
    level: float = 0.95,
    seed: int = 0,
    threads: int = 1,
) -> tuple[float, float]:
    """Percentile bootstrap interval with linear percentile interpolation."""
    a = _as_array(x)
    if a.size == 0:
        raise ValueError("bootstrap of an empty sample")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if stat == "mean" and np.all(a == a[0]):
        # every resample of a constant sample has mean exactly a[0]
        c = float(a[0])
        return c, c
    if stat == "mean":
        def block(idx):
            return a[idx].mean(axis=1)
    else:
        def block(idx):
            return np.array([stat(a[row]) for row in idx])
    reps = bootstrap_replicates(a.size, block, iterations, seed, threads)
    lo, hi = percentile_interval(reps, level)
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# quartiles


def quartile_split(ages: Sequence[float]) -> tuple[QuartileScheme, np.ndarray]:
    a = _as_array(ages, "ages")
    if np.unique(a).size < 4:
        raise ValueError("quartile split needs at least 4 distinct values")
    b = np.percentile(a, [25, 50, 75])
    if not (b[0] < b[1] < b[2]):
        raise ValueError(f"ages too heavily tied to form four quartiles (boundaries {b.tolist()})")
    scheme = QuartileScheme(tuple(float(v) for v in b))
    return scheme, scheme.assign(a)
