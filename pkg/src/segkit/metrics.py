"""Dice and normalized surface distance, per case and across a test set."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import stats
from .labelops import BinaryMask
from .taxonomy import Structure, StructureRegistry, default_registry
from .volio import GridMismatchError, LabelMap, require_same_grid

DEFAULT_TAU_MM = 3.0
DEFAULT_ITERATIONS = 10000
_SIX = ndimage.generate_binary_structure(3, 1)


def _check_pair(a: BinaryMask, b: BinaryMask) -> None:
    if a.data.shape != b.data.shape or not np.allclose(a.affine, b.affine, rtol=0, atol=1e-6):
        raise GridMismatchError("masks are on different grids")


def dice(a: BinaryMask, b: BinaryMask) -> float | None:
    """2|a∩b| / (|a|+|b|); None when both masks are empty."""
    _check_pair(a, b)
    return _dice(a.data, b.data)


def _dice(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if na + nb == 0:
        return None
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour in the background or on the volume edge."""
    eroded = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~eroded


def nsd(a: BinaryMask, b: BinaryMask, tau: float = DEFAULT_TAU_MM) -> float | None:
    """Symmetric normalized surface distance at tolerance ``tau`` mm (strict <)."""
    _check_pair(a, b)
    if not tau > 0:
        raise ValueError("tau must be positive")
    return _nsd(a.data, b.data, a.spacing, tau)


def _nsd(a: np.ndarray, b: np.ndarray, spacing, tau: float) -> float | None:
    any_a, any_b = bool(a.any()), bool(b.any())
    if not any_a and not any_b:
        return None
    if not (any_a and any_b):
        return 0.0
    sa, sb = surface(a), surface(b)
    # distance from every voxel to the nearest surface voxel of the other mask
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    ok = int(np.count_nonzero(dist_to_b[sa] < tau)) + int(np.count_nonzero(dist_to_a[sb] < tau))
    return ok / (int(np.count_nonzero(sa)) + int(np.count_nonzero(sb)))


@dataclass(frozen=True)
class StructureScore:
    dice: float | None
    nsd: float | None
    gt_present: bool
    pred_present: bool


@dataclass
class CaseMetrics:
    case_id: str
    scores: dict[int, StructureScore] = field(default_factory=dict)

    def values(self, metric: str) -> dict[int, float]:
        return {sid: getattr(s, metric) for sid, s in self.scores.items() if getattr(s, metric) is not None}

    def mean(self, metric: str) -> float | None:
        v = list(self.values(metric).values())
        return float(np.mean(v)) if v else None

    def to_dict(self, registry: StructureRegistry | None = None) -> dict:
        registry = registry or default_registry()
        return {
            "case_id": self.case_id,
            "structures": {
                registry.lookup(sid).name: {
                    "dice": s.dice,
                    "nsd": s.nsd,
                    "gt_present": s.gt_present,
                    "pred_present": s.pred_present,
                }
                for sid, s in sorted(self.scores.items())
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping, registry: StructureRegistry | None = None) -> "CaseMetrics":
        registry = registry or default_registry()
        scores = {}
        for name, s in d["structures"].items():
            scores[registry.lookup(name).id] = StructureScore(
                s["dice"], s["nsd"], bool(s["gt_present"]), bool(s["pred_present"])
            )
        return cls(str(d["case_id"]), scores)


def _bbox_slices(*objs) -> tuple[slice, ...] | None:
    """Union of bounding boxes, grown by one voxel (clipped to the volume)."""
    boxes = [o for o in objs if o is not None]
    if not boxes:
        return None
    out = []
    for axis in range(3):
        lo = min(b[axis].start for b in boxes)
        hi = max(b[axis].stop for b in boxes)
        out.append((lo, hi))
    return tuple(slice(lo, hi) for lo, hi in out)


def _pad(slices, shape) -> tuple[slice, ...]:
    return tuple(slice(max(s.start - 1, 0), min(s.stop + 1, n)) for s, n in zip(slices, shape))


def evaluate_case(
    gt: LabelMap,
    pred: LabelMap,
    registry: StructureRegistry | None = None,
    tau: float = DEFAULT_TAU_MM,
    case_id: str = "",
    structures: Iterable[Structure] | None = None,
) -> CaseMetrics:
    """Dice and NSD for every structure (default: whole registry).

    ``pred`` must already be on the ground-truth grid.
    """
    registry = registry or default_registry()
    require_same_grid(gt, pred, "ground truth and prediction")
    if structures is None:
        structures = registry.select("all")
    max_id = max(int(gt.data.max(initial=0)), int(pred.data.max(initial=0)), registry.max_id)
    gt_boxes = ndimage.find_objects(gt.data, max_label=max_id)
    pred_boxes = ndimage.find_objects(pred.data, max_label=max_id)
    scores = {}
    for s in structures:
        g_box, p_box = gt_boxes[s.id - 1], pred_boxes[s.id - 1]
        box = _bbox_slices(g_box, p_box)
        if box is None:
            scores[s.id] = StructureScore(None, None, False, False)
            continue
        # one voxel of margin keeps the surface test exact inside the crop
        box = _pad(box, gt.dims)
        g = gt.data[box] == s.id
        p = pred.data[box] == s.id
        scores[s.id] = StructureScore(
            _dice(g, p), _nsd(g, p, gt.spacing, tau), g_box is not None, p_box is not None
        )
    return CaseMetrics(case_id, scores)


# --------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class MeanCI:
    mean: float | None
    lower: float | None
    upper: float | None
    n: int


@dataclass(frozen=True)
class AggregateReport:
    structures: dict[int, dict[str, MeanCI]]
    overall: dict[str, MeanCI]
    n_cases: int
    iterations: int
    seed: int
    level: float


def _metric_matrix(cases: Sequence[CaseMetrics], ids: Sequence[int], metric: str) -> np.ndarray:
    m = np.full((len(cases), len(ids)), np.nan)
    col = {sid: j for j, sid in enumerate(ids)}
    for i, c in enumerate(cases):
        for sid, v in c.values(metric).items():
            if sid in col:
                m[i, col[sid]] = v
    return m


def _opt(x) -> float | None:
    x = float(x)
    return None if math.isnan(x) else x


def aggregate(
    cases: Sequence[CaseMetrics],
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
    level: float = 0.95,
    threads: int = 1,
    structure_ids: Sequence[int] | None = None,
) -> AggregateReport:
    """Means and percentile-bootstrap CIs over cases.

    The overall score is the mean over cases of each case's mean over its
    scored structures.  Cases are resampled as units, in case-ID order.
    """
    if not cases:
        raise ValueError("aggregate needs at least one case")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cases = sorted(cases, key=lambda c: c.case_id)
    if structure_ids is None:
        structure_ids = sorted({sid for c in cases for sid in c.scores})
    ids = list(structure_ids)
    blocks = []
    for metric in ("dice", "nsd"):
        m = _metric_matrix(cases, ids, metric)
        scored = (~np.isnan(m)).sum(axis=1)
        case_mean = np.where(scored > 0, np.nansum(m, axis=1) / np.maximum(scored, 1), np.nan)
        blocks += [m, case_mean[:, None]]
    # columns: dice per structure, dice overall, nsd per structure, nsd overall
    values = np.concatenate(blocks, axis=1)
    present = ~np.isnan(values)
    filled = np.where(present, values, 0.0)
    weights = present.astype(np.float64)
    n = len(cases)

    def block_means(idx: np.ndarray) -> np.ndarray:
        w = np.zeros((idx.shape[0], n))
        np.add.at(w, (np.arange(idx.shape[0])[:, None], idx), 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return (w @ filled) / (w @ weights)

    reps = stats.bootstrap_replicates(n, block_means, iterations, seed, threads, chunk=1000)
    with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
        # all-NaN columns (structure never scored) are expected here
        warnings.simplefilter("ignore", RuntimeWarning)
        means = filled.sum(axis=0) / present.sum(axis=0)
        lo, hi = stats.percentile_interval(reps, level)
    counts = present.sum(axis=0)
    # a constant column resamples to itself; avoid summation-order noise
    for j in range(values.shape[1]):
        col = values[present[:, j], j]
        if col.size and np.all(col == col[0]):
            means[j] = lo[j] = hi[j] = col[0]

    def entry(j) -> MeanCI:
        if counts[j] == 0:
            return MeanCI(None, None, None, 0)
        return MeanCI(_opt(means[j]), _opt(lo[j]), _opt(hi[j]), int(counts[j]))

    k = len(ids)
    per = {sid: {"dice": entry(j), "nsd": entry(k + 1 + j)} for j, sid in enumerate(ids)}
    overall = {"dice": entry(k), "nsd": entry(2 * k + 1)}
    return AggregateReport(per, overall, n, iterations, seed, level)


# --------------------------------------------------------------------------
# paired comparison


@dataclass(frozen=True)
class ComparisonResult:
    dice: stats.TestResult
    nsd: stats.TestResult
    means: dict[str, dict[str, float | None]]
    n_pairs: dict[str, int]

    def significant(self, metric: str, alpha: float = stats.SIGNIFICANCE_LEVEL) -> bool:
        return getattr(self, metric).p_value < alpha


def compare_runs(a: Sequence[CaseMetrics], b: Sequence[CaseMetrics]) -> ComparisonResult:
    """Paired two-sided signed-rank test on per-case mean Dice and NSD."""
    ma = {c.case_id: c for c in a}
    mb = {c.case_id: c for c in b}
    if len(ma) != len(a) or len(mb) != len(b):
        raise ValueError("duplicate case IDs in a run")
    if set(ma) != set(mb):
        missing = sorted(set(ma) ^ set(mb))
        raise ValueError(f"runs cover different cases; unmatched: {missing[:10]}")
    ids = sorted(ma)
    results, means, n_pairs = {}, {}, {}
    for metric in ("dice", "nsd"):
        pairs = [(ma[i].mean(metric), mb[i].mean(metric)) for i in ids]
        pairs = [(x, y) for x, y in pairs if x is not None and y is not None]
        n_pairs[metric] = len(pairs)
        if pairs:
            xa = np.array([p[0] for p in pairs])
            xb = np.array([p[1] for p in pairs])
            results[metric] = stats.wilcoxon_signed_rank(xa - xb)
            means[metric] = {"a": float(xa.mean()), "b": float(xb.mean())}
        else:
            results[metric] = stats.TestResult(0.0, 1.0, (0,), "no scored pairs")
            means[metric] = {"a": None, "b": None}
    return ComparisonResult(results["dice"], results["nsd"], means, n_pairs)


def evaluate_many(
    pairs: Sequence[tuple[str, LabelMap, LabelMap]],
    registry: StructureRegistry | None = None,
    tau: float = DEFAULT_TAU_MM,
    subset: str = "all",
    threads: int = 1,
) -> list[CaseMetrics]:
    registry = registry or default_registry()
    structures = registry.select(subset)

    def one(p):
        cid, gt, pred = p
        return evaluate_case(gt, pred, registry, tau, cid, structures)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, pairs))
    else:
        out = [one(p) for p in pairs]
    return sorted(out, key=lambda c: c.case_id)
