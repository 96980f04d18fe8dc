"""NIfTI-1 reading and writing for CT volumes and label maps.

Only single-frame 3D images are handled (``.nii``, ``.nii.gz`` and the
``.hdr``/``.img`` pair).  The voxel-to-world transform is taken from the
sform when its code is set, otherwise from the qform, otherwise from a
pixdim diagonal.
"""
from __future__ import annotations

import gzip
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

__all__ = [
    "NiftiError",
    "GridMismatchError",
    "Volume3D",
    "LabelMap",
    "load_volume",
    "save_labelmap",
    "save_volume",
    "same_grid",
]

HEADER_SIZE = 348

# datatype code -> numpy kind/size (endianness applied at read time)
DATATYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    512: "u2",
}
_CODE_FOR_DTYPE = {np.dtype(v).str[1:]: k for k, v in DATATYPES.items()}

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(endian: str) -> np.dtype:
    return np.dtype([(f[0], endian + f[1], *f[2:]) for f in _HEADER_FIELDS])


assert _header_dtype("<").itemsize == HEADER_SIZE


def _offset(name: str) -> int:
    return _header_dtype("<").fields[name][1]


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI-1 content."""

    def __init__(self, message: str, offset: int | None = None, path: str | os.PathLike | None = None):
        self.offset = offset
        self.path = str(path) if path is not None else None
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))


class GridMismatchError(ValueError):
    pass


def _spacing_from_affine(affine: np.ndarray) -> np.ndarray:
    return np.sqrt((affine[:3, :3] ** 2).sum(axis=0))


def _check_grid(affine: np.ndarray, spacing: np.ndarray, shape: tuple[int, ...]) -> None:
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"data must be a non-empty 3D array, got shape {shape}")
    if np.any(spacing <= 0) or not np.all(np.isfinite(spacing)):
        raise ValueError(f"spacing must be positive, got {spacing.tolist()}")
    det = abs(np.linalg.det(affine[:3, :3]))
    prod = float(np.prod(spacing))
    if det == 0 or abs(det - prod) > 1e-6 * prod:
        raise ValueError(
            f"affine is singular or sheared: |det|={det!r} vs spacing product {prod!r}"
        )


@dataclass(frozen=True, eq=False)
class _GridVolume:
    data: np.ndarray
    affine: np.ndarray
    spacing: tuple[float, float, float] = field(init=False)

    def __post_init__(self):
        affine = np.array(self.affine, dtype=np.float64)
        spacing = _spacing_from_affine(affine)
        _check_grid(affine, spacing, np.shape(self.data))
        affine.flags.writeable = False
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def world_coords(self, index) -> np.ndarray:
        """Map (..., 3) voxel indices to world mm."""
        idx = np.asarray(index, dtype=np.float64)
        return idx @ self.affine[:3, :3].T + self.affine[:3, 3]


@dataclass(frozen=True, eq=False)
class Volume3D(_GridVolume):
    """Scalar CT volume; ``data`` holds HU values as float64."""

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        super().__post_init__()


@dataclass(frozen=True, eq=False)
class LabelMap(_GridVolume):
    """Integer label volume (0 = background) stored as uint16."""

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype.kind == "b":
            raw = raw.astype(np.uint8)
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise ValueError("label data must be integral")
        if raw.size and (raw.min() < 0 or raw.max() > np.iinfo(np.uint16).max):
            raise ValueError("label values must lie in [0, 65535]")
        data = np.array(raw, dtype=np.uint16)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        super().__post_init__()

    def labels(self) -> np.ndarray:
        """Sorted non-zero label values present."""
        u = np.unique(self.data)
        return u[u != 0]

    def with_data(self, data) -> "LabelMap":
        return LabelMap(data, self.affine)


def same_grid(a: _GridVolume, b: _GridVolume, tol: float = 1e-6) -> bool:
    return a.dims == b.dims and np.allclose(a.affine, b.affine, rtol=0, atol=tol)


def require_same_grid(a: _GridVolume, b: _GridVolume, what: str = "volumes") -> None:
    if not same_grid(a, b):
        raise GridMismatchError(
            f"{what} are on different grids: dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing} vs {b.spacing}"
        )


# --------------------------------------------------------------------------
# quaternion <-> matrix, following the NIfTI-1 reference conventions


def _quatern_to_affine(b, c, d, qx, qy, qz, dx, dy, dz, qfac) -> np.ndarray:
    a = 1.0 - (b * b + c * c + d * d)
    if a < 1e-7:
        s = 1.0 / np.sqrt(b * b + c * c + d * d)
        a, b, c, d = 0.0, b * s, c * s, d * s
    else:
        a = np.sqrt(a)
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if qfac < 0 else 1.0
    out = np.eye(4)
    out[:3, :3] = r * np.array([dx, dy, qfac * dz])
    out[:3, 3] = [qx, qy, qz]
    return out


def _affine_to_quatern(affine: np.ndarray):
    """Return (b, c, d, qfac) for the rotation part of ``affine``."""
    m = affine[:3, :3] / _spacing_from_affine(affine)
    # nearest orthogonal matrix
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] = -r[:, 2]
    a = r.trace() + 1.0
    if a > 0.5:
        a = 0.5 * np.sqrt(a)
        b = 0.25 * (r[2, 1] - r[1, 2]) / a
        c = 0.25 * (r[0, 2] - r[2, 0]) / a
        d = 0.25 * (r[1, 0] - r[0, 1]) / a
    else:
        xd = 1.0 + r[0, 0] - (r[1, 1] + r[2, 2])
        yd = 1.0 + r[1, 1] - (r[0, 0] + r[2, 2])
        zd = 1.0 + r[2, 2] - (r[0, 0] + r[1, 1])
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (r[0, 1] + r[1, 0]) / b
            d = 0.25 * (r[0, 2] + r[2, 0]) / b
            a = 0.25 * (r[2, 1] - r[1, 2]) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (r[0, 1] + r[1, 0]) / c
            d = 0.25 * (r[1, 2] + r[2, 1]) / c
            a = 0.25 * (r[0, 2] - r[2, 0]) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (r[0, 2] + r[2, 0]) / d
            c = 0.25 * (r[1, 2] + r[2, 1]) / d
            a = 0.25 * (r[1, 0] - r[0, 1]) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return float(b), float(c), float(d), qfac


# --------------------------------------------------------------------------
# reading


def _read_bytes(path: Path) -> bytes:
    if path.name.endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_header(raw: bytes, path) -> tuple[np.void, str]:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"file too short for a {HEADER_SIZE}-byte header ({len(raw)} bytes)", len(raw), path)
    if int.from_bytes(raw[:4], "little", signed=True) == HEADER_SIZE:
        endian = "<"
    elif int.from_bytes(raw[:4], "big", signed=True) == HEADER_SIZE:
        endian = ">"
    else:
        found = int.from_bytes(raw[:4], "little", signed=True)
        raise NiftiError(f"sizeof_hdr is {found}, expected {HEADER_SIZE}", 0, path)
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype(endian))[0]
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic not in (b"n+1", b"ni1"):
        if magic in (b"n+2", b"ni2"):
            raise NiftiError("NIfTI-2 files are not supported", _offset("magic"), path)
        raise NiftiError(f"bad magic {magic!r} (Analyze 7.5 or corrupt file)", _offset("magic"), path)
    return hdr, endian


def _header_affine(hdr: np.void) -> np.ndarray:
    pixdim = hdr["pixdim"].astype(np.float64)
    if int(hdr["sform_code"]) > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
        if abs(np.linalg.det(aff[:3, :3])) > 0:
            return aff
    if int(hdr["qform_code"]) > 0:
        dx, dy, dz = (abs(v) if v != 0 else 1.0 for v in pixdim[1:4])
        return _quatern_to_affine(
            float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"]),
            float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]),
            dx, dy, dz, float(pixdim[0]),
        )
    spacing = [abs(v) if v > 0 else 1.0 for v in pixdim[1:4]]
    return np.diag([*spacing, 1.0])


def _image_dims(hdr: np.void, path) -> tuple[int, int, int]:
    dim = [int(v) for v in hdr["dim"]]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"dim[0]={ndim} out of range", _offset("dim"), path)
    if ndim > 3 and any(n > 1 for n in dim[4 : ndim + 1]):
        raise NiftiError(f"{ndim}D images are not supported (dims {dim[1:ndim + 1]})", _offset("dim"), path)
    shape = [dim[i] if i <= ndim else 1 for i in (1, 2, 3)]
    if any(n < 1 for n in shape):
        raise NiftiError(f"non-positive image dimension in {shape}", _offset("dim"), path)
    return tuple(shape)


def _read_raw(path: Path) -> tuple[np.void, np.ndarray]:
    raw = _read_bytes(path)
    hdr, endian = _parse_header(raw, path)
    shape = _image_dims(hdr, path)
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}", _offset("datatype"), path)
    dtype = np.dtype(endian + DATATYPES[code])
    if bytes(hdr["magic"]).rstrip(b"\x00") == b"n+1":
        payload, data_start = raw, int(hdr["vox_offset"])
        if data_start < HEADER_SIZE:
            raise NiftiError(f"vox_offset {data_start} lies inside the header", _offset("vox_offset"), path)
    else:
        img = _pair_image_path(path)
        payload, data_start = _read_bytes(img), int(hdr["vox_offset"])
        path = img
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(payload) < data_start + nbytes:
        raise NiftiError(
            f"truncated data section: need {nbytes} bytes from offset {data_start}, "
            f"file has {len(payload) - data_start}",
            len(payload),
            path,
        )
    arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=data_start)
    return hdr, arr.reshape(shape, order="F")


def _pair_image_path(hdr_path: Path) -> Path:
    name = hdr_path.name
    for suffix in (".hdr.gz", ".hdr"):
        if name.endswith(suffix):
            stem = name[: -len(suffix)]
            for cand in (stem + ".img", stem + ".img.gz"):
                p = hdr_path.with_name(cand)
                if p.exists():
                    return p
    raise NiftiError("header declares a separate image file but no .img was found", _offset("magic"), hdr_path)


def load_volume(
    path: str | os.PathLike,
    kind: Literal["scalar", "label"] = "scalar",
    max_label: int = 104,
) -> Volume3D | LabelMap:
    """Load a NIfTI-1 file as a scalar volume (HU) or a label map.

    Scalars get ``raw * scl_slope + scl_inter`` applied (a zero slope counts
    as one).  Labels are read without rescaling and must be non-negative
    integers no larger than ``max_label``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    hdr, raw = _read_raw(path)
    affine = _header_affine(hdr)
    if kind == "scalar":
        slope = float(hdr["scl_slope"])
        inter = float(hdr["scl_inter"])
        if slope == 0 or not np.isfinite(slope):
            slope = 1.0
        if not np.isfinite(inter):
            inter = 0.0
        data = raw.astype(np.float64) * slope + inter
        return Volume3D(data, affine)
    if kind != "label":
        raise ValueError(f"kind must be 'scalar' or 'label', got {kind!r}")
    data_off = int(hdr["vox_offset"])
    if raw.dtype.kind == "f":
        bad = ~np.isfinite(raw) | (raw != np.round(raw))
        if bad.any():
            i = int(np.flatnonzero(bad.ravel(order="F"))[0])
            raise NiftiError(
                f"non-integer label value {raw.ravel(order='F')[i]!r}",
                data_off + i * raw.dtype.itemsize,
                path,
            )
    flat = raw.ravel(order="F")
    bad = (flat < 0) | (flat > max_label)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NiftiError(
            f"unregistered label {flat[i]:g} (allowed 0..{max_label})",
            data_off + i * raw.dtype.itemsize,
            path,
        )
    return LabelMap(raw.astype(np.uint16), affine)


# --------------------------------------------------------------------------
# writing


def _build_header(shape, affine: np.ndarray, dtype: np.dtype, slope=1.0, inter=0.0) -> bytes:
    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *shape, 1, 1, 1, 1]
    hdr["datatype"] = _CODE_FOR_DTYPE[dtype.str[1:]]
    hdr["bitpix"] = dtype.itemsize * 8
    spacing = _spacing_from_affine(affine)
    b, c, d, qfac = _affine_to_quatern(affine)
    hdr["pixdim"] = [qfac, *spacing, 1, 1, 1, 1]
    hdr["vox_offset"] = HEADER_SIZE + 4
    hdr["scl_slope"] = slope
    hdr["scl_inter"] = inter
    hdr["xyzt_units"] = 2  # mm
    hdr["qform_code"] = 1
    hdr["sform_code"] = 1
    hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = b, c, d
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = affine[:3, 3]
    hdr["srow_x"] = affine[0]
    hdr["srow_y"] = affine[1]
    hdr["srow_z"] = affine[2]
    hdr["magic"] = b"n+1"
    return hdr.tobytes() + b"\x00" * 4


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            if path.name.endswith(".gz"):
                # mtime=0 keeps output byte-identical between runs
                with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                    gz.write(payload)
            else:
                fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(data: np.ndarray, affine: np.ndarray, dtype) -> bytes:
    dtype = np.dtype(dtype).newbyteorder("<")
    header = _build_header(data.shape, affine, dtype)
    return header + np.asarray(data, dtype=dtype).tobytes(order="F")


def save_labelmap(labels: LabelMap, path: str | os.PathLike) -> None:
    """Write a label map as uint8 NIfTI-1 (gzipped when ``path`` ends in .gz)."""
    if labels.data.size and labels.data.max() > 255:
        raise ValueError(f"label value {int(labels.data.max())} does not fit uint8")
    _atomic_write(Path(path), _encode(labels.data, labels.affine, np.uint8))


def save_volume(volume: Volume3D, path: str | os.PathLike, dtype="float32") -> None:
    _atomic_write(Path(path), _encode(volume.data, volume.affine, dtype))
