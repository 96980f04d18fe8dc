"""Per-structure volume and attenuation, plausibility filtering, aging analysis."""
from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import stats
from .grid import resample_to
from .taxonomy import StructureRegistry, default_registry
from .volio import LabelMap, Volume3D, load_volume, require_same_grid, same_grid

log = logging.getLogger(__name__)

MIN_RECORDS = 8
QUANTITIES = ("volume", "hu")
SEXES = ("male", "female", "unknown")


@dataclass(frozen=True)
class StructureMeasure:
    volume_ml: float
    mean_hu: float | None
    valid: bool = False


@dataclass(frozen=True)
class CohortRecord:
    patient_id: str
    age: float
    sex: str
    measures: dict[int, StructureMeasure]
    errors: dict[int, str] = field(default_factory=dict)

    def value(self, sid: int, quantity: str) -> float | None:
        m = self.measures.get(sid)
        if m is None or not m.valid:
            return None
        return m.volume_ml if quantity == "volume" else m.mean_hu


def structure_volume(labels: LabelMap, structure_id: int) -> float:
    """Volume in ml (voxel count x voxel volume in mm^3 / 1000)."""
    return int(np.count_nonzero(labels.data == structure_id)) * labels.voxel_volume_mm3 / 1000.0


def structure_mean_hu(ct: Volume3D, labels: LabelMap, structure_id: int) -> float | None:
    require_same_grid(ct, labels, "CT and label map")
    sel = labels.data == structure_id
    if not sel.any():
        return None
    return float(ct.data[sel].mean())


def measure(ct: Volume3D, labels: LabelMap, registry: StructureRegistry | None = None) -> dict[int, StructureMeasure]:
    """Volume and mean HU for every registered structure (validity unset).

    Label maps on a different grid are first resampled onto the CT grid
    (nearest neighbour).
    """
    registry = registry or default_registry()
    if not same_grid(ct, labels):
        labels = resample_to(labels, ct, mode="nearest")
    ids = np.array(registry.ids)
    lab = labels.data.ravel()
    # one pass over the volume instead of 104 masks
    counts = np.bincount(lab, minlength=registry.max_id + 1)
    sums = np.bincount(lab, weights=ct.data.ravel(), minlength=registry.max_id + 1)
    vox_ml = labels.voxel_volume_mm3 / 1000.0
    out = {}
    for sid in ids:
        c = int(counts[sid])
        out[int(sid)] = StructureMeasure(c * vox_ml, float(sums[sid] / c) if c else None)
    return out


def plausibility_filter(record: CohortRecord, registry: StructureRegistry | None = None) -> CohortRecord:
    """Mark each structure valid iff present and volume >= its cutoff."""
    registry = registry or default_registry()
    measures = {}
    for sid, m in record.measures.items():
        cutoff = registry.lookup(sid).cutoff_ml
        ok = m.volume_ml > 0 and m.mean_hu is not None and not (m.volume_ml < cutoff)
        measures[sid] = replace(m, valid=bool(ok))
    return replace(record, measures=measures)


def make_record(patient_id: str, age: float, sex: str, ct: Volume3D, labels: LabelMap, registry=None) -> CohortRecord:
    registry = registry or default_registry()
    rec = CohortRecord(patient_id, float(age), _norm_sex(sex), measure(ct, labels, registry))
    return plausibility_filter(rec, registry)


def _norm_sex(sex) -> str:
    s = str(sex or "").strip().lower()
    return {"m": "male", "f": "female"}.get(s, s if s in SEXES else "unknown")


# --------------------------------------------------------------------------
# cohort extraction


@dataclass(frozen=True)
class CaseEntry:
    patient_id: str
    ct_path: Path
    seg_path: Path
    age: float | None
    sex: str = "unknown"


@dataclass(frozen=True)
class SkipEntry:
    patient_id: str
    reason: str


def read_manifest(path: str | os.PathLike) -> list[CaseEntry]:
    """Parse a manifest CSV (patient_id, ct_path, seg_path, age, sex).

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"patient_id", "ct_path", "seg_path", "age"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"manifest {path} lacks columns: {sorted(missing)}")
        for row in reader:
            age_txt = (row.get("age") or "").strip()
            try:
                age = float(age_txt) if age_txt else None
            except ValueError:
                age = None
            out.append(
                CaseEntry(
                    row["patient_id"].strip(),
                    base / row["ct_path"].strip(),
                    base / row["seg_path"].strip(),
                    age,
                    _norm_sex(row.get("sex")),
                )
            )
    return out


def _extract_one(entry: CaseEntry, registry: StructureRegistry) -> CohortRecord | SkipEntry:
    if entry.age is None or not math.isfinite(entry.age):
        return SkipEntry(entry.patient_id, "unknown age")
    try:
        ct = load_volume(entry.ct_path, "scalar")
        seg = load_volume(entry.seg_path, "label", max_label=registry.max_id)
    except (OSError, ValueError) as exc:
        return SkipEntry(entry.patient_id, f"{type(exc).__name__}: {exc}")
    try:
        return make_record(entry.patient_id, entry.age, entry.sex, ct, seg, registry)
    except (ValueError, ArithmeticError) as exc:
        return SkipEntry(entry.patient_id, f"{type(exc).__name__}: {exc}")


def cohort_extract(
    cases: Sequence[CaseEntry],
    registry: StructureRegistry | None = None,
    threads: int = 1,
) -> tuple[list[CohortRecord], list[SkipEntry]]:
    """Measure every case; failures go to the skip list instead of aborting."""
    registry = registry or default_registry()
    ids = [c.patient_id for c in cases]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ValueError(f"duplicate patient_id(s): {dup}")

    def one(c):
        return _extract_one(c, registry)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, cases))
    else:
        results = [one(c) for c in cases]
    records = sorted((r for r in results if isinstance(r, CohortRecord)), key=lambda r: r.patient_id)
    skipped = sorted((r for r in results if isinstance(r, SkipEntry)), key=lambda r: r.patient_id)
    for s in skipped:
        log.warning("skipping %s: %s", s.patient_id, s.reason)
    return records, skipped


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_cohort_csv(records: Sequence[CohortRecord], path: str | os.PathLike, registry=None) -> None:
    """One row per patient; per structure (ID order): volume_ml, mean_hu, valid."""
    from .report import atomic_write_text

    registry = registry or default_registry()
    header = ["patient_id", "age", "sex"]
    for s in registry:
        header += [f"{s.slug}_volume_ml", f"{s.slug}_mean_hu", f"{s.slug}_valid"]
    lines = [",".join(header)]
    for r in sorted(records, key=lambda r: r.patient_id):
        row = [r.patient_id, _fmt(float(r.age)), r.sex]
        for s in registry:
            m = r.measures.get(s.id)
            row += [_fmt(m.volume_ml), _fmt(m.mean_hu), _fmt(m.valid)] if m else ["", "", "0"]
        lines.append(",".join(row))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_cohort_csv(path: str | os.PathLike, registry=None) -> list[CohortRecord]:
    registry = registry or default_registry()
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            measures = {}
            for s in registry:
                vol = row.get(f"{s.slug}_volume_ml", "")
                if vol == "":
                    continue
                hu = row.get(f"{s.slug}_mean_hu", "")
                measures[s.id] = StructureMeasure(float(vol), float(hu) if hu else None, row.get(f"{s.slug}_valid") == "1")
            out.append(CohortRecord(row["patient_id"], float(row["age"]), row["sex"], measures))
    return out


# --------------------------------------------------------------------------
# aging analysis


@dataclass(frozen=True)
class QuantityResult:
    n: int
    skipped: str | None = None
    spearman_r: float | None = None
    spearman_p: float | None = None
    ks_d: float | None = None
    ks_p: float | None = None
    kruskal_h: float | None = None
    kruskal_p: float | None = None
    quartile_n: tuple[int, int, int, int] | None = None
    posthoc_p: dict[str, float | None] = field(default_factory=dict)
    threshold: float = stats.BONFERRONI_THRESHOLD

    @property
    def spearman_significant(self) -> bool:
        return self.spearman_p is not None and stats.significant(self.spearman_p, self.threshold)

    @property
    def kruskal_significant(self) -> bool:
        return self.kruskal_p is not None and stats.significant(self.kruskal_p, self.threshold)

    def posthoc_significant(self) -> dict[str, bool | None]:
        return {k: (None if p is None else stats.significant(p, self.threshold)) for k, p in self.posthoc_p.items()}


@dataclass(frozen=True)
class AgingReport:
    quartiles: stats.QuartileScheme
    threshold: float
    n_records: int
    results: dict[int, dict[str, QuantityResult]]


QUARTILE_PAIRS = tuple(itertools.combinations((1, 2, 3, 4), 2))


def _analyse(ages: np.ndarray, values: np.ndarray, quart: np.ndarray, min_n: int, threshold: float) -> QuantityResult:
    n = values.size
    if n < min_n:
        return QuantityResult(n, skipped=f"insufficient n ({n} < {min_n})", threshold=threshold)
    try:
        sp = stats.spearman(ages, values)
    except ValueError as exc:
        return QuantityResult(n, skipped=str(exc), threshold=threshold)
    try:
        ks = stats.ks_normality(values)
        ks_d, ks_p = ks.statistic, ks.p_value
    except ValueError:
        ks_d = ks_p = None
    groups = {q: values[quart == q] for q in (1, 2, 3, 4)}
    nonempty = [g for g in groups.values() if g.size]
    kw_h = kw_p = None
    if len(nonempty) >= 2:
        kw = stats.kruskal_wallis(nonempty)
        kw_h, kw_p = kw.statistic, kw.p_value
    post = {}
    for a, b in QUARTILE_PAIRS:
        key = f"Q{a}-Q{b}"
        if groups[a].size and groups[b].size:
            post[key] = stats.mann_whitney_u(groups[a], groups[b]).p_value
        else:
            post[key] = None
    return QuantityResult(
        n, None, sp.r_s, sp.p_value, ks_d, ks_p, kw_h, kw_p,
        tuple(int(groups[q].size) for q in (1, 2, 3, 4)), post, threshold,
    )


def aging_analysis(
    records: Sequence[CohortRecord],
    registry: StructureRegistry | None = None,
    min_n: int = MIN_RECORDS,
    threshold: float = stats.BONFERRONI_THRESHOLD,
    structures: Sequence[int] | None = None,
) -> AgingReport:
    """Spearman vs age, quartile Kruskal-Wallis and pairwise rank-sum tests.

    Age quartiles are cut once on the whole cohort; each structure then uses
    only its valid records.
    """
    registry = registry or default_registry()
    records = sorted(records, key=lambda r: r.patient_id)
    if not records:
        raise ValueError("aging analysis needs records")
    all_ages = np.array([r.age for r in records])
    scheme, _ = stats.quartile_split(all_ages)
    ids = list(structures) if structures is not None else list(registry.ids)
    results = {}
    for sid in ids:
        results[sid] = {}
        for q in QUANTITIES:
            pairs = [(r.age, r.value(sid, q)) for r in records]
            pairs = [(a, v) for a, v in pairs if v is not None]
            ages = np.array([p[0] for p in pairs], dtype=float)
            vals = np.array([p[1] for p in pairs], dtype=float)
            results[sid][q] = _analyse(ages, vals, scheme.assign(ages), min_n, threshold)
    return AgingReport(scheme, threshold, len(records), results)


def aging_report_to_dict(report: AgingReport, registry: StructureRegistry | None = None) -> dict:
    registry = registry or default_registry()
    structures = {}
    for sid, per in report.results.items():
        entry = {}
        for q, r in per.items():
            entry[q] = {
                "n": r.n,
                "skipped": r.skipped,
                "spearman_r": r.spearman_r,
                "spearman_p": r.spearman_p,
                "spearman_significant": r.spearman_significant,
                "ks_d": r.ks_d,
                "ks_p": r.ks_p,
                "kruskal_h": r.kruskal_h,
                "kruskal_p": r.kruskal_p,
                "kruskal_significant": r.kruskal_significant,
                "quartile_n": list(r.quartile_n) if r.quartile_n else None,
                "posthoc_p": r.posthoc_p,
                "posthoc_significant": r.posthoc_significant(),
            }
        structures[registry.lookup(sid).name] = entry
    return {
        "quartile_boundaries": list(report.quartiles.boundaries),
        "significance_threshold": report.threshold,
        "n_records": report.n_records,
        "structures": structures,
    }


def record_to_dict(record: CohortRecord, registry: StructureRegistry | None = None) -> dict:
    registry = registry or default_registry()
    return {
        "patient_id": record.patient_id,
        "age": record.age,
        "sex": record.sex,
        "structures": {
            registry.lookup(sid).name: {"volume_ml": m.volume_ml, "mean_hu": m.mean_hu, "valid": m.valid}
            for sid, m in sorted(record.measures.items())
        },
    }
