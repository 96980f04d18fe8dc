"""Isotropic resampling of CT volumes and label maps.

Grids are voxel-center aligned: the target keeps the source origin (center
of voxel 0) and direction cosines, only the voxel size changes.  A source
voxel covers ``[i - 0.5, i + 0.5]`` in index space, so a target center is
"inside" the source when its continuous index lies in ``[-0.5, n - 0.5]``
on every axis; anything outside gets the fill value.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .volio import LabelMap, Volume3D

AIR_HU = -1024.0
PRESET_SPACINGS = (1.5, 3.0)

# Relative slack on the footprint bounds so round-off in the affine product
# does not push an on-boundary center outside.
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class TargetGrid:
    spacing_iso: float
    dims: tuple[int, int, int]
    affine: np.ndarray

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.spacing_iso,) * 3


def build_target_grid(src: Volume3D | LabelMap, spacing_iso: float) -> TargetGrid:
    if not spacing_iso > 0:
        raise ValueError(f"spacing_iso must be positive, got {spacing_iso}")
    extent = np.asarray(src.dims, dtype=np.float64) * np.asarray(src.spacing)
    # tolerate float noise such as 512*0.8/1.6 = 256.00000000000006
    dims = tuple(int(math.ceil(round(e / spacing_iso, 9))) for e in extent)
    direction = src.affine[:3, :3] / np.asarray(src.spacing)
    affine = np.eye(4)
    affine[:3, :3] = direction * spacing_iso
    affine[:3, 3] = src.affine[:3, 3]
    affine.flags.writeable = False
    return TargetGrid(float(spacing_iso), dims, affine)


def source_index_transform(src: Volume3D | LabelMap, grid: TargetGrid) -> np.ndarray:
    """4x4 matrix taking target voxel indices to continuous source indices."""
    try:
        inv = np.linalg.inv(src.affine)
    except np.linalg.LinAlgError:
        raise ValueError("source affine is not invertible") from None
    return inv @ grid.affine


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _sample_slab(
    data: np.ndarray, xform: np.ndarray, dims, k0: int, k1: int, mode: str, fill
) -> np.ndarray:
    nx, ny, _ = dims
    i, j, k = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(k0, k1, dtype=np.float64),
        indexing="ij",
    )
    coords = [
        xform[a, 0] * i + xform[a, 1] * j + xform[a, 2] * k + xform[a, 3] for a in range(3)
    ]
    shape = data.shape
    inside = np.ones(i.shape, dtype=bool)
    for a in range(3):
        lo, hi = -0.5 - _EDGE_EPS, shape[a] - 0.5 + _EDGE_EPS
        inside &= (coords[a] >= lo) & (coords[a] <= hi)

    out = np.full(i.shape, fill, dtype=data.dtype if mode == "nearest" else np.float64)
    if not inside.any():
        return out
    c = [coords[a][inside] for a in range(3)]
    if mode == "nearest":
        idx = [np.clip(_round_half_away(c[a]), 0, shape[a] - 1).astype(np.intp) for a in range(3)]
        out[inside] = data[idx[0], idx[1], idx[2]]
        return out

    # trilinear with edge replication inside the half-voxel border
    lo_idx, frac = [], []
    for a in range(3):
        ca = np.clip(c[a], 0.0, shape[a] - 1)
        f0 = np.minimum(np.floor(ca), max(shape[a] - 2, 0)).astype(np.intp)
        lo_idx.append(f0)
        frac.append(ca - f0 if shape[a] > 1 else np.zeros_like(ca))
    hi_idx = [np.minimum(lo_idx[a] + 1, shape[a] - 1) for a in range(3)]
    acc = np.zeros(c[0].shape, dtype=np.float64)
    for dx in (0, 1):
        wx = frac[0] if dx else 1.0 - frac[0]
        ix = hi_idx[0] if dx else lo_idx[0]
        for dy in (0, 1):
            wy = frac[1] if dy else 1.0 - frac[1]
            iy = hi_idx[1] if dy else lo_idx[1]
            for dz in (0, 1):
                wz = frac[2] if dz else 1.0 - frac[2]
                iz = hi_idx[2] if dz else lo_idx[2]
                acc += wx * wy * wz * data[ix, iy, iz]
    # convex weights can overshoot by an ulp; keep the min/max bound exact
    out[inside] = np.clip(acc, data.min(), data.max())
    return out


def resample(
    src: Volume3D | LabelMap,
    grid: TargetGrid,
    mode: Literal["trilinear", "nearest"] | None = None,
    fill: float | None = None,
    threads: int = 1,
    slab: int = 16,
) -> Volume3D | LabelMap:
    """Resample ``src`` onto ``grid``.

    Label maps must use ``nearest``; scalars default to ``trilinear``.
    Out-of-footprint voxels get ``fill`` (-1024 HU for scalars, 0 for labels).
    """
    is_label = isinstance(src, LabelMap)
    if mode is None:
        mode = "nearest" if is_label else "trilinear"
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if is_label and mode != "nearest":
        raise ValueError("label maps can only be resampled with mode='nearest'")
    if fill is None:
        fill = 0 if is_label else AIR_HU

    xform = source_index_transform(src, grid)
    nz = grid.dims[2]
    bounds = [(k, min(k + slab, nz)) for k in range(0, nz, slab)]

    def work(b):
        return _sample_slab(src.data, xform, grid.dims, b[0], b[1], mode, fill)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pieces = list(pool.map(work, bounds))
    else:
        pieces = [work(b) for b in bounds]
    data = np.concatenate(pieces, axis=2)
    if is_label:
        return LabelMap(data, grid.affine)
    return Volume3D(data, grid.affine)


def resample_to(src: Volume3D | LabelMap, reference: Volume3D | LabelMap, mode=None) -> Volume3D | LabelMap:
    """Resample onto another volume's (not necessarily isotropic) grid."""
    g = TargetGrid(float("nan"), reference.dims, reference.affine)
    return resample(src, g, mode=mode)


def resample_iso(src: Volume3D | LabelMap, spacing_iso: float = 1.5, mode=None, threads: int = 1):
    return resample(src, build_target_grid(src, spacing_iso), mode=mode, threads=threads)
