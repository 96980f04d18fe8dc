"""Slow reference implementations used to cross-check the fast code paths.

Everything here is written directly from the defining formulas (set
arithmetic, all-pairs distances, full enumeration) and shares no code with
the modules it checks, apart from the bootstrap stream protocol.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

_NEIGHBOURS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def voxel_set(mask: np.ndarray) -> set[tuple[int, int, int]]:
    return {tuple(int(v) for v in p) for p in np.argwhere(mask)}


def brute_dice(a: np.ndarray, b: np.ndarray) -> float | None:
    sa, sb = voxel_set(a), voxel_set(b)
    if not sa and not sb:
        return None
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def brute_surface(mask: np.ndarray) -> set[tuple[int, int, int]]:
    shape = mask.shape
    out = set()
    for p in voxel_set(mask):
        for d in _NEIGHBOURS_6:
            q = (p[0] + d[0], p[1] + d[1], p[2] + d[2])
            if not all(0 <= q[i] < shape[i] for i in range(3)) or not mask[q]:
                out.add(p)
                break
    return out


def brute_nsd(a: np.ndarray, b: np.ndarray, spacing, tau: float) -> float | None:
    sa, sb = brute_surface(a), brute_surface(b)
    if not a.any() and not b.any():
        return None
    if not a.any() or not b.any():
        return 0.0
    pa = np.array(sorted(sa), dtype=float) * np.asarray(spacing)
    pb = np.array(sorted(sb), dtype=float) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
    ok = int((d.min(axis=1) < tau).sum()) + int((d.min(axis=0) < tau).sum())
    return ok / (len(sa) + len(sb))


def brute_midranks(x: Sequence[float]) -> list[float]:
    return [sum(v < xi for v in x) + (sum(v == xi for v in x) + 1) / 2 for xi in x]


def direct_spearman(x: Sequence[float], y: Sequence[float]) -> float:
    rx, ry = brute_midranks(x), brute_midranks(y)
    n = len(x)
    mx, my = sum(rx) / n, sum(ry) / n
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


def enumerate_signed_rank_p(d: Sequence[float]) -> float:
    """Exact two-sided p by visiting all 2^n sign assignments."""
    nz = [v for v in d if v != 0]
    n = len(nz)
    if n == 0:
        return 1.0
    ranks = brute_midranks([abs(v) for v in nz])
    w_obs = sum(r for r, v in zip(ranks, nz) if v > 0)
    ge = le = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        ge += w >= w_obs - 1e-9
        le += w <= w_obs + 1e-9
    return min(1.0, 2.0 * min(ge, le) / 2**n)


def _u_pairwise(x, y) -> float:
    return sum((xi > yj) + 0.5 * (xi == yj) for xi in x for yj in y)


def permutation_rank_sum_p(x: Sequence[float], y: Sequence[float]) -> float:
    """Two-sided p over every split of the pooled sample into sizes |x|, |y|."""
    pooled = list(x) + list(y)
    nx, ny = len(x), len(y)
    centre = nx * ny / 2
    obs = abs(_u_pairwise(x, y) - centre)
    hits = total = 0
    for comb in itertools.combinations(range(nx + ny), nx):
        chosen = set(comb)
        xs = [pooled[i] for i in comb]
        ys = [pooled[i] for i in range(nx + ny) if i not in chosen]
        hits += abs(_u_pairwise(xs, ys) - centre) >= obs - 1e-9
        total += 1
    return hits / total


def direct_kruskal_h(groups: Sequence[Sequence[float]]) -> float:
    pooled = [v for g in groups for v in g]
    ranks = brute_midranks(pooled)
    n = len(pooled)
    h, pos = 0.0, 0
    for g in groups:
        r = sum(ranks[pos : pos + len(g)])
        h += r * r / len(g)
        pos += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3 * (n + 1)
    ties = {}
    for v in pooled:
        ties[v] = ties.get(v, 0) + 1
    c = 1 - sum(t**3 - t for t in ties.values()) / (n**3 - n)
    return h / c


def ecdf_ks_distance(x: Sequence[float]) -> float:
    """sup |F_n - Phi| against the normal fitted by mean and SD (ddof=1)."""
    n = len(x)
    mean = sum(x) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in x) / (n - 1))
    d = 0.0
    for v in x:
        phi = 0.5 * (1 + math.erf((v - mean) / sd / math.sqrt(2)))
        below = sum(u < v for u in x) / n
        at = sum(u <= v for u in x) / n
        d = max(d, abs(at - phi), abs(phi - below))
    return d


def union_find_labels(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Component labels via union-find; numbering by first voxel in C order."""
    if connectivity == 6:
        offs = [d for d in itertools.product((-1, 0, 1), repeat=3) if sum(map(abs, d)) == 1]
    else:
        offs = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
    pts = [tuple(p) for p in np.argwhere(mask)]
    index = {p: i for i, p in enumerate(pts)}
    parent = list(range(len(pts)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for p, i in index.items():
        for d in offs:
            j = index.get((p[0] + d[0], p[1] + d[1], p[2] + d[2]))
            if j is not None:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    out = np.zeros(mask.shape, dtype=np.int64)
    names = {}
    for p, i in index.items():  # argwhere yields C order
        r = find(i)
        names.setdefault(r, len(names) + 1)
        out[p] = names[r]
    return out


def python_bootstrap_means(x: Sequence[float], iterations: int, seed: int, rng_for: Callable) -> list[float]:
    """Sorted bootstrap means with a plain Python loop, one stream per iteration."""
    n = len(x)
    out = []
    for it in range(iterations):
        idx = rng_for(seed, it).integers(0, n, size=n)
        out.append(math.fsum(x[int(i)] for i in idx) / n)
    return sorted(out)


def linear_percentile(sorted_vals: Sequence[float], q: float) -> float:
    pos = (len(sorted_vals) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * (pos - lo)


# --------------------------------------------------------------------------
# self-test


def run_self_test(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Cross-check fast implementations against the oracles above."""
    from . import labelops, metrics, stats
    from .labelops import BinaryMask

    rng = np.random.default_rng(seed)
    out: list[tuple[str, bool, str]] = []

    worst = 0.0
    for _ in range(20):
        shape = tuple(rng.integers(3, 10, size=3))
        a = rng.random(shape) < rng.uniform(0.05, 0.6)
        b = rng.random(shape) < rng.uniform(0.05, 0.6)
        sp = tuple(rng.choice([0.8, 1.0, 1.5, 2.0], size=3))
        ma, mb = BinaryMask(a, np.diag([*sp, 1])), BinaryMask(b, np.diag([*sp, 1]))
        for fast, slow in ((metrics.dice(ma, mb), brute_dice(a, b)), (metrics.nsd(ma, mb, 3.0), brute_nsd(a, b, sp, 3.0))):
            if (fast is None) != (slow is None):
                worst = math.inf
            elif fast is not None:
                worst = max(worst, abs(fast - slow))
    out.append(("dice/nsd vs brute force", worst <= 1e-12, f"max abs diff {worst:.3g}"))

    ok = True
    for n in range(1, 11):
        d = rng.integers(-5, 6, size=n).astype(float)
        ok &= stats.wilcoxon_signed_rank(d).p_value == enumerate_signed_rank_p(d)
    out.append(("signed-rank exact p vs 2^n enumeration", bool(ok), "n = 1..10"))

    worst = 0.0
    for _ in range(10):
        x = rng.integers(0, 12, size=rng.integers(1, 7)).astype(float)
        y = rng.integers(0, 12, size=rng.integers(1, 7)).astype(float)
        worst = max(worst, abs(stats.mann_whitney_u(x, y).p_value - permutation_rank_sum_p(x, y)))
    out.append(("rank-sum p vs permutation", worst <= 0.02, f"max abs diff {worst:.3g}"))

    h = stats.kruskal_wallis([[1, 2, 3], [4, 5, 6], [7, 8, 9]]).statistic
    out.append(("Kruskal-Wallis H on separated groups", abs(h - 7.2) < 1e-12, f"H = {h!r}"))

    x = rng.integers(0, 6, size=15).astype(float)
    y = rng.integers(0, 6, size=15).astype(float)
    diff = abs(stats.spearman(x, y).r_s - direct_spearman(x, y))
    out.append(("Spearman vs direct midrank Pearson", diff <= 1e-12, f"abs diff {diff:.3g}"))

    from statistics import NormalDist

    q = np.array([NormalDist().inv_cdf((i - 0.5) / 100) for i in range(1, 101)])
    diff = abs(stats.ks_normality(q).statistic - ecdf_ks_distance(q))
    out.append(("KS distance vs empirical CDF", diff <= 1e-10, f"abs diff {diff:.3g}"))

    mask = rng.random((8, 8, 8)) < 0.12
    inst = labelops.connected_components(BinaryMask(mask, np.eye(4)), 26)
    same = np.array_equal(inst.data, union_find_labels(mask, 26))
    out.append(("26-connected components vs union-find", bool(same), f"k = {inst.k}"))

    vals = rng.normal(size=20)
    lo, hi = stats.bootstrap_percentile_ci(vals, iterations=400, seed=seed)
    ref = python_bootstrap_means(list(vals), 400, seed, stats.iteration_rng)
    ok = abs(lo - linear_percentile(ref, 2.5)) < 1e-12 and abs(hi - linear_percentile(ref, 97.5)) < 1e-12
    out.append(("bootstrap CI vs loop implementation", bool(ok), f"[{lo:.6f}, {hi:.6f}]"))
    return out
