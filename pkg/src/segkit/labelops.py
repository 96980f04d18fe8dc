"""Label map algebra: part merging, per-structure masks, instance splitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .taxonomy import StructureRegistry, default_registry
from .volio import GridMismatchError, LabelMap, same_grid

log = logging.getLogger(__name__)

MAX_RIBS = 12
RIB_MIN_FRAGMENT_ML = 0.2
RIB_BRIDGE_MM = 5.0
BONE_CONNECTIVITY = 26
SURFACE_CONNECTIVITY = 6


class FragmentedInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BinaryMask:
    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=bool)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", np.array(self.affine, dtype=np.float64))

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def spacing(self):
        return tuple(float(s) for s in np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0)))

    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    @classmethod
    def like(cls, ref, data) -> "BinaryMask":
        return cls(data, ref.affine)


@dataclass(frozen=True, eq=False)
class InstanceLabeling:
    data: np.ndarray
    affine: np.ndarray
    k: int


@dataclass(frozen=True)
class MergeResult:
    labels: LabelMap
    conflicts: int


def merge_parts(parts: Sequence[LabelMap], registry: StructureRegistry | None = None) -> MergeResult:
    """Combine per-part label maps into one map.

    ``parts[i]`` is the output for part ``i + 1`` and may only contain that
    part's IDs.  Voxels claimed by more than one part keep the label of the
    lowest part index; each such voxel counts as one conflict.
    """
    registry = registry or default_registry()
    if not parts:
        raise ValueError("no parts to merge")
    ref = parts[0]
    for n, p in enumerate(parts[1:], start=2):
        if not same_grid(ref, p):
            raise GridMismatchError(f"part {n} is on a different grid than part 1")
    out = np.zeros(ref.dims, dtype=np.uint16)
    claimed = np.zeros(ref.dims, dtype=bool)
    conflicts = 0
    for n, p in enumerate(parts, start=1):
        allowed = np.array(registry.part_ids(n), dtype=np.uint16)
        present = p.labels()
        foreign = np.setdiff1d(present, allowed)
        if foreign.size:
            raise ValueError(f"part {n} contains IDs not assigned to it: {foreign.tolist()}")
        fg = p.data != 0
        conflicts += int(np.count_nonzero(fg & claimed))
        take = fg & ~claimed
        out[take] = p.data[take]
        claimed |= fg
    return MergeResult(LabelMap(out, ref.affine), conflicts)


def extract_mask(labels: LabelMap, structure_id: int) -> BinaryMask:
    return BinaryMask(labels.data == structure_id, labels.affine)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: BinaryMask, connectivity: int = BONE_CONNECTIVITY) -> InstanceLabeling:
    """Label connected components; IDs follow first-voxel raster order (C order)."""
    lab, k = ndimage.label(mask.data, structure=_structure(connectivity))
    return InstanceLabeling(lab.astype(np.int32), mask.affine, int(k))


def _bridge_small_fragments(lab: np.ndarray, k: int, spacing, voxel_ml: float) -> tuple[np.ndarray, int]:
    """Fold components below the size threshold into a nearby large one.

    A small component joins the large component whose nearest voxel is
    closest (center-to-center, mm), provided that distance is within
    ``RIB_BRIDGE_MM``; otherwise it is dropped with a warning.
    """
    sizes = np.bincount(lab.ravel(), minlength=k + 1)[1:] * voxel_ml
    small = [i + 1 for i in range(k) if sizes[i] < RIB_MIN_FRAGMENT_ML]
    if not small:
        return lab, k
    large = np.isin(lab, [i + 1 for i in range(k) if sizes[i] >= RIB_MIN_FRAGMENT_ML])
    out = lab.copy()
    if large.any():
        dist, nearest = ndimage.distance_transform_edt(~large, sampling=spacing, return_indices=True)
    for c in small:
        where = lab == c
        if large.any():
            d = dist[where]
            j = int(np.argmin(d))
            if d[j] <= RIB_BRIDGE_MM:
                target = tuple(nearest[a][where][j] for a in range(3))
                out[where] = lab[target]
                continue
        log.warning("dropping %.3f ml rib fragment with no large component within %.1f mm", sizes[c - 1], RIB_BRIDGE_MM)
        out[where] = 0
    # compact ids back to 1..k'
    keep = np.unique(out)
    keep = keep[keep != 0]
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[keep] = np.arange(1, keep.size + 1)
    return remap[out], int(keep.size)


def split_rib_instances(mask: BinaryMask, side: str = "left") -> list[tuple[int, BinaryMask]]:
    """Split a one-sided all-ribs mask into numbered ribs.

    Components (26-connected, after fragment bridging) are numbered by
    centroid world z, highest first, so rib 1 is the most cranial present.
    """
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    inst = connected_components(mask, BONE_CONNECTIVITY)
    voxel_ml = float(np.prod(mask.spacing)) / 1000.0
    lab, k = _bridge_small_fragments(inst.data, inst.k, mask.spacing, voxel_ml)
    if k > MAX_RIBS:
        raise FragmentedInputError(
            f"{k} rib components on the {side} side after fragment suppression (max {MAX_RIBS})"
        )
    if k == 0:
        return []
    idx = np.nonzero(lab)
    ids = lab[idx]
    counts = np.bincount(ids, minlength=k + 1)[1:]
    centroid_idx = np.stack(
        [np.bincount(ids, weights=idx[a], minlength=k + 1)[1:] / counts for a in range(3)], axis=1
    )
    world_z = centroid_idx @ mask.affine[2, :3] + mask.affine[2, 3]
    # ties broken by component id so the order is total
    order = sorted(range(k), key=lambda c: (-world_z[c], c))
    return [(n, BinaryMask(lab == c + 1, mask.affine)) for n, c in enumerate(order, start=1)]


def rib_structure_id(side: str, number: int, registry: StructureRegistry | None = None) -> int:
    registry = registry or default_registry()
    return registry.lookup(f"rib {side} {number}").id
