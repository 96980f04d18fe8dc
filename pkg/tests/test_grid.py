from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from segkit.grid import AIR_HU, TargetGrid, build_target_grid, resample, resample_iso, resample_to, source_index_transform
from segkit.volio import LabelMap, Volume3D

from .conftest import iso_affine


def test_dims_64_at_3mm_to_128():
    src = Volume3D(np.zeros((64, 64, 64)), iso_affine(3.0))
    assert build_target_grid(src, 1.5).dims == (128, 128, 128)


def test_dims_identity_spacing():
    src = Volume3D(np.zeros((7, 9, 11)), iso_affine(1.5))
    assert build_target_grid(src, 1.5).dims == (7, 9, 11)


def test_dims_anisotropic_formula():
    src = LabelMap(np.zeros((512, 512, 280), np.uint8), iso_affine((0.8, 0.8, 1.0)))
    expected = tuple(math.ceil(n * s / 1.5) for n, s in zip((512, 512, 280), (0.8, 0.8, 1.0)))
    assert expected == (274, 274, 187)
    assert build_target_grid(src, 1.5).dims == expected


def test_target_covers_source_within_one_voxel():
    rng = np.random.default_rng(0)
    for _ in range(50):
        dims = tuple(int(v) for v in rng.integers(1, 40, 3))
        sp = tuple(float(v) for v in rng.choice([0.5, 0.7, 0.8, 1.0, 1.25, 2.0, 3.0, 5.0], 3))
        iso = float(rng.choice([0.75, 1.0, 1.5, 3.0]))
        g = build_target_grid(Volume3D(np.zeros(dims), iso_affine(sp)), iso)
        for n, s, m in zip(dims, sp, g.dims):
            assert m * iso >= n * s - 1e-9
            assert (m - 1) * iso < n * s


def test_grid_keeps_origin_and_direction():
    aff = np.array([[0, -2.0, 0, 5], [2.0, 0, 0, -3], [0, 0, 1.0, 9], [0, 0, 0, 1]])
    g = build_target_grid(Volume3D(np.zeros((4, 4, 4)), aff), 1.0)
    assert np.allclose(g.affine[:3, 3], [5, -3, 9])
    assert np.allclose(g.affine[:3, :3], [[0, -1, 0], [1, 0, 0], [0, 0, 1]])


def test_nonpositive_spacing_rejected():
    with pytest.raises(ValueError):
        build_target_grid(Volume3D(np.zeros((2, 2, 2)), np.eye(4)), 0.0)


def test_nearest_identity():
    rng = np.random.default_rng(1)
    lab = LabelMap(rng.integers(0, 105, (9, 8, 7)), iso_affine(1.5))
    out = resample_iso(lab, 1.5)
    assert np.array_equal(out.data, lab.data)
    assert np.allclose(out.affine, lab.affine)


def test_trilinear_identity():
    rng = np.random.default_rng(2)
    v = Volume3D(rng.normal(size=(6, 7, 8)), iso_affine(1.5))
    assert np.array_equal(resample_iso(v, 1.5).data, v.data)


def test_constant_field_stays_constant():
    v = Volume3D(np.full((10, 11, 12), 37.5), iso_affine((0.8, 1.1, 2.5)))
    for iso in (0.75, 1.5, 3.0):
        g = build_target_grid(v, iso)
        out = resample(v, g)
        xform = source_index_transform(v, g)
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in g.dims], indexing="ij"), -1).reshape(-1, 3)
        src = idx @ xform[:3, :3].T + xform[:3, 3]
        inside = np.all((src >= -0.5 - 1e-9) & (src <= np.array(v.dims) - 0.5 + 1e-9), axis=1)
        vals = out.data.reshape(-1)
        assert np.all(vals[inside] == 37.5)
        assert np.all(vals[~inside] == AIR_HU)


def test_upsample_by_two_is_fully_inside():
    v = Volume3D(np.full((64, 64, 64), 5.0), iso_affine(3.0))
    out = resample_iso(v, 1.5)
    assert out.dims == (128, 128, 128)
    assert np.all(out.data == 5.0)


def _brute_nearest(src: LabelMap, g: TargetGrid) -> np.ndarray:
    inv = np.linalg.inv(src.affine) @ g.affine
    out = np.zeros(g.dims, dtype=src.data.dtype)
    for i in range(g.dims[0]):
        for j in range(g.dims[1]):
            for k in range(g.dims[2]):
                c = inv[:3, :3] @ [i, j, k] + inv[:3, 3]
                if all(-0.5 - 1e-9 <= c[a] <= src.dims[a] - 0.5 + 1e-9 for a in range(3)):
                    idx = [min(max(int(math.floor(abs(x) + 0.5) * (1 if x >= 0 else -1)), 0), n - 1) for x, n in zip(c, src.dims)]
                    out[i, j, k] = src.data[tuple(idx)]
    return out


@settings(max_examples=25, deadline=None)
@given(
    st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    st.tuples(*[st.sampled_from([0.5, 0.8, 1.0, 1.5, 2.0, 3.0])] * 3),
    st.sampled_from([0.75, 1.0, 1.5, 2.0]),
    st.integers(0, 2**31),
)
def test_nearest_matches_per_voxel_oracle_and_never_grows_labels(dims, sp, iso, seed):
    rng = np.random.default_rng(seed)
    lab = LabelMap(rng.choice([0, 3, 17, 104], size=dims), iso_affine(sp))
    g = build_target_grid(lab, iso)
    out = resample(lab, g, mode="nearest")
    assert np.array_equal(out.data, _brute_nearest(lab, g))
    assert set(np.unique(out.data)) <= set(np.unique(lab.data)) | {0}


def test_trilinear_matches_map_coordinates_inside():
    rng = np.random.default_rng(4)
    v = Volume3D(rng.normal(size=(12, 10, 9)), iso_affine((1.2, 0.9, 2.0)))
    g = build_target_grid(v, 0.7)
    out = resample(v, g, threads=3, slab=4)
    xform = source_index_transform(v, g)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in g.dims], indexing="ij"), 0).reshape(3, -1)
    src = xform[:3, :3] @ idx + xform[:3, 3:4]
    core = np.all((src >= 0) & (src <= np.array(v.dims)[:, None] - 1), axis=0)
    ref = ndimage.map_coordinates(v.data, src[:, core], order=1)
    assert np.allclose(out.data.reshape(-1)[core], ref, atol=1e-12)


def test_trilinear_bounded_by_data_range():
    rng = np.random.default_rng(5)
    v = Volume3D(rng.uniform(-200, 300, size=(8, 8, 8)), iso_affine(2.0))
    out = resample_iso(v, 0.6)
    g = build_target_grid(v, 0.6)
    xform = source_index_transform(v, g)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in g.dims], indexing="ij"), -1).reshape(-1, 3)
    src = idx @ xform[:3, :3].T + xform[:3, 3]
    inside = np.all((src >= -0.5 - 1e-9) & (src <= 7.5 + 1e-9), axis=1)
    vals = out.data.reshape(-1)[inside]
    assert vals.min() >= v.data.min() and vals.max() <= v.data.max()


def test_threads_do_not_change_output():
    rng = np.random.default_rng(6)
    v = Volume3D(rng.normal(size=(20, 20, 40)), iso_affine((1.0, 1.0, 2.5)))
    a = resample_iso(v, 1.5, threads=1)
    b = resample_iso(v, 1.5, threads=8)
    assert np.array_equal(a.data, b.data)


def test_labels_need_nearest():
    lab = LabelMap(np.zeros((2, 2, 2)), np.eye(4))
    with pytest.raises(ValueError):
        resample_iso(lab, 1.0, mode="trilinear")


def test_resample_to_reference_grid():
    lab = LabelMap(np.arange(8).reshape(2, 2, 2), iso_affine(2.0))
    ref = Volume3D(np.zeros((4, 4, 4)), iso_affine(1.0))
    out = resample_to(lab, ref)
    assert out.dims == (4, 4, 4)
    assert np.allclose(out.affine, ref.affine)
    assert set(np.unique(out.data)) <= set(range(8))
