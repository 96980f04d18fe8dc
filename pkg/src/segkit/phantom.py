"""Synthetic CT/label phantoms with analytically known volumes and HU.

Shapes are rasterized by testing voxel centers (no partial-volume
weighting).  Background is air (-1024 HU); Gaussian noise with ``noise_sd``
is added to every voxel of the CT.

Phantom spec JSON::

    {
      "grid": {"dims": [64, 64, 64], "spacing": [1.5, 1.5, 1.5], "origin": [0, 0, 0]},
      "shapes": [
        {"structure": "spleen", "geometry": "sphere", "center_mm": [48, 48, 48],
         "radius_mm": 15, "hu": 50},
        {"structure": "liver", "geometry": "box", "center_mm": [20, 20, 20],
         "size_mm": [10, 12, 14], "hu": 60}
      ],
      "noise_sd": 0,
      "seed": 0
    }

A cohort spec instead carries ``{"cohort": {"n": 50, "seed": 0, "trends":
{"autochthon left": {"volume_slope_ml_per_year": 0, "hu_slope_per_year": -1}}}}``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .grid import AIR_HU
from .taxonomy import StructureRegistry, default_registry
from .volio import LabelMap, Volume3D, save_labelmap, save_volume


class OverlapError(ValueError):
    pass


@dataclass(frozen=True)
class Shape:
    structure_id: int
    geometry: str  # "sphere" | "box"
    center_mm: tuple[float, float, float]
    size_mm: tuple[float, ...]  # (radius,) for spheres, full edge lengths for boxes
    hu: float

    def __post_init__(self):
        if self.geometry == "sphere":
            if len(self.size_mm) != 1 or self.size_mm[0] <= 0:
                raise ValueError("sphere needs one positive radius")
        elif self.geometry == "box":
            if len(self.size_mm) != 3 or min(self.size_mm) <= 0:
                raise ValueError("box needs three positive edge lengths")
        else:
            raise ValueError(f"unknown geometry {self.geometry!r}")

    @property
    def analytic_volume_mm3(self) -> float:
        if self.geometry == "sphere":
            return 4.0 / 3.0 * math.pi * self.size_mm[0] ** 3
        return float(np.prod(self.size_mm))

    @property
    def half_extent(self) -> np.ndarray:
        if self.geometry == "sphere":
            return np.full(3, self.size_mm[0])
        return np.asarray(self.size_mm) / 2.0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center_mm)
        if self.geometry == "sphere":
            return (d**2).sum(axis=-1) <= self.size_mm[0] ** 2
        return np.all(np.abs(d) <= np.asarray(self.size_mm) / 2.0, axis=-1)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    shapes: tuple[Shape, ...]
    noise_sd: float = 0.0
    seed: int = 0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def affine(self) -> np.ndarray:
        a = np.diag([*self.spacing, 1.0])
        a[:3, 3] = self.origin
        return a


@dataclass(frozen=True)
class TruthRow:
    structure_id: int
    name: str
    geometry: str
    analytic_volume_ml: float
    raster_volume_ml: float
    voxels: int
    hu: float


def _shapes_overlap(a: Shape, b: Shape) -> bool:
    ca, cb = np.asarray(a.center_mm), np.asarray(b.center_mm)
    if a.geometry == "sphere" and b.geometry == "sphere":
        return float(np.linalg.norm(ca - cb)) < a.size_mm[0] + b.size_mm[0]
    if a.geometry == "box" and b.geometry == "box":
        return bool(np.all(np.abs(ca - cb) < a.half_extent + b.half_extent))
    sphere, box = (a, b) if a.geometry == "sphere" else (b, a)
    cs, cbx = np.asarray(sphere.center_mm), np.asarray(box.center_mm)
    closest = np.clip(cs, cbx - box.half_extent, cbx + box.half_extent)
    return float(np.linalg.norm(closest - cs)) < sphere.size_mm[0]


def validate(spec: PhantomSpec, registry: StructureRegistry | None = None) -> None:
    registry = registry or default_registry()
    if len(spec.dims) != 3 or min(spec.dims) < 1:
        raise ValueError(f"bad dims {spec.dims}")
    if len(spec.spacing) != 3 or min(spec.spacing) <= 0:
        raise ValueError(f"bad spacing {spec.spacing}")
    if spec.noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    seen = set()
    for s in spec.shapes:
        registry.lookup(s.structure_id)
        if s.structure_id in seen:
            raise ValueError(f"structure {s.structure_id} appears twice")
        seen.add(s.structure_id)
    for i, a in enumerate(spec.shapes):
        for b in spec.shapes[i + 1 :]:
            if _shapes_overlap(a, b):
                raise OverlapError(f"shapes for structures {a.structure_id} and {b.structure_id} overlap")


def _index_window(shape: Shape, spec: PhantomSpec) -> tuple[slice, ...]:
    lo = (np.asarray(shape.center_mm) - shape.half_extent - np.asarray(spec.origin)) / np.asarray(spec.spacing)
    hi = (np.asarray(shape.center_mm) + shape.half_extent - np.asarray(spec.origin)) / np.asarray(spec.spacing)
    return tuple(
        slice(max(int(math.floor(l)) - 1, 0), min(int(math.ceil(h)) + 2, n))
        for l, h, n in zip(lo, hi, spec.dims)
    )


def generate(spec: PhantomSpec, registry: StructureRegistry | None = None):
    """Rasterize ``spec``; returns (ct, labels, truth rows)."""
    registry = registry or default_registry()
    validate(spec, registry)
    labels = np.zeros(spec.dims, dtype=np.uint16)
    ct = np.full(spec.dims, AIR_HU, dtype=np.float64)
    truth = []
    for s in spec.shapes:
        win = _index_window(s, spec)
        grids = np.meshgrid(*[np.arange(w.start, w.stop) for w in win], indexing="ij")
        pts = np.stack(
            [g * sp + o for g, sp, o in zip(grids, spec.spacing, spec.origin)], axis=-1
        )
        inside = s.contains(pts)
        sub = labels[win]
        if np.any(sub[inside] != 0):
            raise OverlapError(f"structure {s.structure_id} overlaps another shape after rasterization")
        sub[inside] = s.structure_id
        ct[win][inside] = s.hu
        voxels = int(np.count_nonzero(inside))
        truth.append(
            TruthRow(
                s.structure_id,
                registry.lookup(s.structure_id).name,
                s.geometry,
                s.analytic_volume_mm3 / 1000.0,
                voxels * float(np.prod(spec.spacing)) / 1000.0,
                voxels,
                s.hu,
            )
        )
    if spec.noise_sd > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
        ct += rng.normal(0.0, spec.noise_sd, size=spec.dims)
    aff = spec.affine
    return Volume3D(ct, aff), LabelMap(labels, aff), truth


# --------------------------------------------------------------------------
# JSON spec


def _parse_shape(d: Mapping, registry: StructureRegistry) -> Shape:
    sid = registry.lookup(d["structure"]).id
    geometry = d["geometry"]
    if geometry == "sphere":
        size = (float(d["radius_mm"]),)
    else:
        size = tuple(float(v) for v in d["size_mm"])
    return Shape(sid, geometry, tuple(float(v) for v in d["center_mm"]), size, float(d["hu"]))


def spec_from_dict(d: Mapping, registry: StructureRegistry | None = None) -> PhantomSpec:
    registry = registry or default_registry()
    g = d["grid"]
    spacing = g["spacing"]
    if isinstance(spacing, (int, float)):
        spacing = [spacing] * 3
    return PhantomSpec(
        dims=tuple(int(v) for v in g["dims"]),
        spacing=tuple(float(v) for v in spacing),
        shapes=tuple(_parse_shape(s, registry) for s in d.get("shapes", [])),
        noise_sd=float(d.get("noise_sd", 0.0)),
        seed=int(d.get("seed", 0)),
        origin=tuple(float(v) for v in g.get("origin", (0.0, 0.0, 0.0))),
    )


def spec_to_dict(spec: PhantomSpec, registry: StructureRegistry | None = None) -> dict:
    registry = registry or default_registry()
    shapes = []
    for s in spec.shapes:
        d = {"structure": registry.lookup(s.structure_id).name, "geometry": s.geometry, "center_mm": list(s.center_mm)}
        if s.geometry == "sphere":
            d["radius_mm"] = s.size_mm[0]
        else:
            d["size_mm"] = list(s.size_mm)
        d["hu"] = s.hu
        shapes.append(d)
    return {
        "grid": {"dims": list(spec.dims), "spacing": list(spec.spacing), "origin": list(spec.origin)},
        "shapes": shapes,
        "noise_sd": spec.noise_sd,
        "seed": spec.seed,
    }


# --------------------------------------------------------------------------
# cohorts


@dataclass(frozen=True)
class Trend:
    volume_slope_ml_per_year: float = 0.0
    hu_slope_per_year: float = 0.0


@dataclass(frozen=True)
class LayoutItem:
    structure: str
    geometry: str
    center_mm: tuple[float, float, float]
    base_volume_ml: float
    base_hu: float
    aspect: tuple[float, float, float] = (1.0, 1.0, 1.0)  # box edge ratios


# Non-overlapping for volumes up to MAX_VOLUME_FACTOR x base on the default grid.
DEFAULT_LAYOUT = (
    LayoutItem("spleen", "sphere", (45.0, 45.0, 60.0), 100.0, 120.0),
    LayoutItem("liver", "box", (138.0, 50.0, 60.0), 300.0, 60.0),
    LayoutItem("aorta", "box", (96.0, 140.0, 95.0), 150.0, 200.0, (1.0, 1.0, 4.0)),
    LayoutItem("autochthon left", "box", (40.0, 145.0, 95.0), 200.0, 50.0, (1.0, 1.0, 3.1)),
    LayoutItem("iliopsoas left", "box", (150.0, 150.0, 100.0), 150.0, 45.0, (1.0, 1.0, 2.35)),
)
DEFAULT_COHORT_DIMS = (64, 64, 64)
DEFAULT_COHORT_SPACING = 3.0
REFERENCE_AGE = 50.0
AGE_RANGE = (18.0, 100.0)
MIN_VOLUME_FACTOR = 0.4
MAX_VOLUME_FACTOR = 1.6


@dataclass(frozen=True)
class CohortCase:
    patient_id: str
    age: float
    sex: str
    spec: PhantomSpec


@dataclass(frozen=True)
class Cohort:
    cases: tuple[CohortCase, ...]
    trends: dict[int, Trend]
    seed: int
    volume_sd_fraction: float
    hu_sd: float


def _shape_for_volume(item: LayoutItem, sid: int, volume_ml: float, hu: float) -> Shape:
    v = volume_ml * 1000.0
    if item.geometry == "sphere":
        return Shape(sid, "sphere", item.center_mm, ((3.0 * v / (4.0 * math.pi)) ** (1.0 / 3.0),), hu)
    a = np.asarray(item.aspect, dtype=float)
    edge = (v / float(np.prod(a))) ** (1.0 / 3.0)
    return Shape(sid, "box", item.center_mm, tuple(float(x) for x in edge * a), hu)


def generate_cohort(
    n: int,
    trends: Mapping[int | str, Trend] | None = None,
    seed: int = 0,
    layout: Sequence[LayoutItem] = DEFAULT_LAYOUT,
    dims: tuple[int, int, int] = DEFAULT_COHORT_DIMS,
    spacing: float = DEFAULT_COHORT_SPACING,
    volume_sd_fraction: float = 0.08,
    hu_sd: float = 10.0,
    noise_sd: float = 20.0,
    registry: StructureRegistry | None = None,
) -> Cohort:
    """Phantom cohort with ages uniform on 18..100 and planted linear trends.

    Each structure's volume is ``base + slope * (age - 50)`` plus Gaussian
    between-patient scatter (``volume_sd_fraction * base``), clamped to
    [0.4, 1.6] x base; mean HU likewise with ``hu_sd`` scatter.  Case ``i``
    draws from ``SeedSequence(seed, spawn_key=(i,))``.
    """
    if n < 8:
        raise ValueError("a cohort needs at least 8 cases")
    registry = registry or default_registry()
    resolved = {registry.lookup(k).id: v for k, v in (trends or {}).items()}
    ids = {item.structure: registry.lookup(item.structure).id for item in layout}
    unknown = set(resolved) - set(ids.values())
    if unknown:
        raise ValueError(f"trend given for structures not in the layout: {sorted(unknown)}")
    cases = []
    width = len(str(n - 1))
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
        age = float(rng.uniform(*AGE_RANGE))
        sex = "male" if rng.random() < 0.5 else "female"
        shapes = []
        for item in layout:
            sid = ids[item.structure]
            tr = resolved.get(sid, Trend())
            dv = rng.normal(0.0, volume_sd_fraction * item.base_volume_ml)
            dh = rng.normal(0.0, hu_sd)
            vol = item.base_volume_ml + tr.volume_slope_ml_per_year * (age - REFERENCE_AGE) + dv
            vol = float(np.clip(vol, MIN_VOLUME_FACTOR * item.base_volume_ml, MAX_VOLUME_FACTOR * item.base_volume_ml))
            hu = item.base_hu + tr.hu_slope_per_year * (age - REFERENCE_AGE) + dh
            shapes.append(_shape_for_volume(item, sid, vol, float(hu)))
        spec = PhantomSpec(dims, (spacing,) * 3, tuple(shapes), noise_sd, int(rng.integers(2**31)))
        cases.append(CohortCase(f"P{i:0{width}d}", age, sex, spec))
    return Cohort(tuple(cases), resolved, seed, volume_sd_fraction, hu_sd)


def cohort_from_dict(d: Mapping, registry: StructureRegistry | None = None) -> Cohort:
    c = d["cohort"]
    trends = {k: Trend(**v) for k, v in c.get("trends", {}).items()}
    kwargs = {k: c[k] for k in ("volume_sd_fraction", "hu_sd", "noise_sd", "spacing") if k in c}
    if "dims" in c:
        kwargs["dims"] = tuple(c["dims"])
    return generate_cohort(int(c["n"]), trends, int(c.get("seed", 0)), registry=registry, **kwargs)


def truth_to_dict(truth: Sequence[TruthRow]) -> list[dict]:
    return [asdict(t) for t in truth]


def write_case(spec: PhantomSpec, out_dir: Path, stem: str = "", registry=None) -> tuple[Path, Path, list[TruthRow]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ct, seg, truth = generate(spec, registry)
    prefix = f"{stem}_" if stem else ""
    ct_path, seg_path = out_dir / f"{prefix}ct.nii.gz", out_dir / f"{prefix}seg.nii.gz"
    save_volume(ct, ct_path)
    save_labelmap(seg, seg_path)
    return ct_path, seg_path, truth


def write_cohort(cohort: Cohort, out_dir: Path, registry: StructureRegistry | None = None) -> Path:
    """Render every case to NIfTI and write ``manifest.csv`` and ``truth.json``."""
    registry = registry or default_registry()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, truth = [], {}
    for case in cohort.cases:
        ct_path, seg_path, t = write_case(case.spec, out_dir / case.patient_id, registry=registry)
        rows.append([case.patient_id, ct_path.relative_to(out_dir).as_posix(), seg_path.relative_to(out_dir).as_posix(), repr(case.age), case.sex])
        truth[case.patient_id] = {"age": case.age, "sex": case.sex, "structures": truth_to_dict(t)}
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "ct_path", "seg_path", "age", "sex"])
        w.writerows(rows)
    planted = {
        registry.lookup(sid).name: asdict(tr) for sid, tr in sorted(cohort.trends.items())
    }
    with open(out_dir / "truth.json", "w") as fh:
        json.dump({"seed": cohort.seed, "planted_trends": planted, "cases": truth}, fh, indent=1, sort_keys=True)
    return manifest
