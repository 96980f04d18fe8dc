from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from segkit import phantom
from segkit.volio import load_volume


def sphere_spec(spacing, radius=15.0, noise=0.0, seed=0, hu=50.0):
    n = int(math.ceil(2 * (radius + 5) / spacing))
    c = n * spacing / 2
    return phantom.PhantomSpec((n, n, n), (spacing,) * 3, (phantom.Shape(1, "sphere", (c, c, c), (radius,), hu),), noise, seed)


def rel_err(spacing):
    _, _, truth = phantom.generate(sphere_spec(spacing))
    return abs(truth[0].raster_volume_ml - truth[0].analytic_volume_ml) / truth[0].analytic_volume_ml


def test_sphere_volume_converges():
    e15, e075 = rel_err(1.5), rel_err(0.75)
    assert e15 < 0.03
    assert e075 < e15


def test_zero_noise_mean_hu_exact():
    ct, seg, _ = phantom.generate(sphere_spec(1.5, hu=37.25))
    assert ct.data[seg.data == 1].mean() == 37.25
    assert np.all(ct.data[seg.data == 0] == -1024.0)


def test_seed_determinism():
    a = phantom.generate(sphere_spec(1.5, noise=20, seed=4))
    b = phantom.generate(sphere_spec(1.5, noise=20, seed=4))
    c = phantom.generate(sphere_spec(1.5, noise=20, seed=5))
    assert np.array_equal(a[0].data, b[0].data)
    assert not np.array_equal(a[0].data, c[0].data)


def test_box_volume_exact_when_aligned():
    spec = phantom.PhantomSpec((20, 20, 20), (1.0, 1.0, 1.0), (phantom.Shape(5, "box", (10.0, 10.0, 10.0), (6.0, 4.0, 2.0), 0.0),))
    _, seg, truth = phantom.generate(spec)
    assert truth[0].voxels == int((seg.data == 5).sum())
    assert truth[0].analytic_volume_ml == pytest.approx(0.048)


def test_overlap_rejected():
    shapes = (
        phantom.Shape(1, "sphere", (10.0, 10.0, 10.0), (5.0,), 0.0),
        phantom.Shape(2, "box", (16.0, 10.0, 10.0), (4.0, 4.0, 4.0), 0.0),
    )
    with pytest.raises(phantom.OverlapError):
        phantom.generate(phantom.PhantomSpec((30, 30, 30), (1.0, 1.0, 1.0), shapes))


def test_duplicate_structure_and_bad_noise():
    s = phantom.Shape(1, "sphere", (10.0, 10.0, 10.0), (2.0,), 0.0)
    t = phantom.Shape(1, "sphere", (20.0, 20.0, 20.0), (2.0,), 0.0)
    with pytest.raises(ValueError):
        phantom.validate(phantom.PhantomSpec((30, 30, 30), (1.0,) * 3, (s, t)))
    with pytest.raises(ValueError):
        phantom.validate(phantom.PhantomSpec((30, 30, 30), (1.0,) * 3, (s,), noise_sd=-1))


def test_spec_json_roundtrip():
    spec = sphere_spec(1.5, noise=3.0, seed=9)
    assert phantom.spec_from_dict(json.loads(json.dumps(phantom.spec_to_dict(spec)))) == spec


def test_default_layout_never_overlaps_at_extremes(registry):
    for f in (phantom.MIN_VOLUME_FACTOR, 1.0, phantom.MAX_VOLUME_FACTOR):
        shapes = tuple(
            phantom._shape_for_volume(i, registry.lookup(i.structure).id, i.base_volume_ml * f, i.base_hu)
            for i in phantom.DEFAULT_LAYOUT
        )
        spec = phantom.PhantomSpec(phantom.DEFAULT_COHORT_DIMS, (phantom.DEFAULT_COHORT_SPACING,) * 3, shapes)
        _, seg, truth = phantom.generate(spec)
        assert all(t.voxels > 0 for t in truth)
        extent = np.array(phantom.DEFAULT_COHORT_DIMS) * phantom.DEFAULT_COHORT_SPACING
        for s in shapes:
            assert np.all(np.asarray(s.center_mm) - s.half_extent >= 0)
            assert np.all(np.asarray(s.center_mm) + s.half_extent <= extent - phantom.DEFAULT_COHORT_SPACING)


def test_cohort_size_and_ages():
    co = phantom.generate_cohort(50, seed=2)
    assert len(co.cases) == 50
    assert len({c.patient_id for c in co.cases}) == 50
    ages = [c.age for c in co.cases]
    assert 18 <= min(ages) and max(ages) <= 100


def test_cohort_trend_planted():
    co = phantom.generate_cohort(100, {"aorta": phantom.Trend(0.0, -2.0)}, seed=1, noise_sd=0.0)
    sid = co.cases[0].spec.shapes[2].structure_id
    hu = np.array([[s.hu for s in c.spec.shapes if s.structure_id == sid][0] for c in co.cases])
    ages = np.array([c.age for c in co.cases])
    assert np.polyfit(ages, hu, 1)[0] == pytest.approx(-2.0, abs=0.3)


def test_cohort_rejects_unknown_trend():
    with pytest.raises(ValueError):
        phantom.generate_cohort(10, {"brain": phantom.Trend(1.0, 0.0)})


def test_write_cohort(tmp_path):
    co = phantom.cohort_from_dict({"cohort": {"n": 8, "seed": 3, "dims": [32, 32, 32], "spacing": 6.0}})
    manifest = phantom.write_cohort(co, tmp_path)
    rows = list(csv.DictReader(open(manifest)))
    assert len(rows) == 8
    ct = load_volume(tmp_path / rows[0]["ct_path"])
    assert ct.dims == (32, 32, 32)
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert set(truth["cases"]) == {r["patient_id"] for r in rows}
