from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from segkit import cli
from segkit.report import dumps
from segkit.volio import LabelMap, load_volume, save_labelmap

from .conftest import iso_affine

SPEC = {
    "grid": {"dims": [40, 40, 40], "spacing": 1.5},
    "shapes": [
        {"structure": "spleen", "geometry": "sphere", "center_mm": [30, 30, 30], "radius_mm": 10, "hu": 50},
        {"structure": "liver", "geometry": "box", "center_mm": [12, 12, 12], "size_mm": [8, 8, 8], "hu": 60},
    ],
    "noise_sd": 5,
    "seed": 1,
}


@pytest.fixture
def case_dirs(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    assert cli.dispatch(["phantom", "--spec", str(tmp_path / "spec.json"), "--out-dir", str(tmp_path / "ph")]) == 0
    for d in ("gt", "pred"):
        (tmp_path / d).mkdir()
        for c in ("a", "b", "c"):
            shutil.copy(tmp_path / "ph" / "seg.nii.gz", tmp_path / d / f"{c}.nii.gz")
    return tmp_path


def run(*argv):
    return cli.dispatch([str(a) for a in argv])


def test_evaluate_identity(case_dirs, capsys):
    out = case_dirs / "r.json"
    assert run("evaluate", "--gt-dir", case_dirs / "gt", "--pred-dir", case_dirs / "pred", "--out", out, "--iterations", 200) == 0
    rep = json.loads(out.read_text())
    assert rep["overall"]["dice"] == 1.0 and rep["overall"]["nsd"] == 1.0
    assert rep["spleen"] == {"dice": 1.0, "nsd": 1.0, "dice_ci": [1.0, 1.0], "nsd_ci": [1.0, 1.0], "n": 3}
    assert rep["meta"]["config"]["tau"] == 3.0
    assert "Dice 1.0000" in capsys.readouterr().out


def test_evaluate_resamples_prediction(case_dirs):
    lab = load_volume(case_dirs / "pred" / "a.nii.gz", "label")
    coarse = LabelMap(lab.data[::2, ::2, ::2], iso_affine(3.0))
    save_labelmap(coarse, case_dirs / "pred" / "a.nii.gz")
    out = case_dirs / "r.json"
    assert run("evaluate", "--gt-dir", case_dirs / "gt", "--pred-dir", case_dirs / "pred", "--out", out, "--iterations", 50) == 0
    rep = json.loads(out.read_text())
    assert 0.8 < rep["overall"]["dice"] < 1.0


def test_evaluate_missing_prediction(case_dirs, capsys):
    (case_dirs / "pred" / "b.nii.gz").unlink()
    out = case_dirs / "r.json"
    assert run("evaluate", "--gt-dir", case_dirs / "gt", "--pred-dir", case_dirs / "pred", "--out", out) == 1
    assert not out.exists()
    assert "no prediction" in capsys.readouterr().err


def test_missing_input_no_partial_output(tmp_path):
    out = tmp_path / "rec.json"
    assert run("morph", "--ct", tmp_path / "nope.nii", "--seg", tmp_path / "nope2.nii", "--out", out) == 1
    assert list(tmp_path.iterdir()) == []


def test_unknown_flag_usage_on_stderr(capsys):
    assert run("taxonomy", "dump", "--bogus") == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err


def test_no_command(capsys):
    assert cli.dispatch([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_compare_identical(case_dirs):
    cases = case_dirs / "cases.json"
    assert run("evaluate", "--gt-dir", case_dirs / "gt", "--pred-dir", case_dirs / "pred", "--out", case_dirs / "r.json",
               "--iterations", 10, "--cases-out", cases) == 0
    assert run("compare", "--a", cases, "--b", cases, "--out", case_dirs / "cmp.json") == 0
    cmp = json.loads((case_dirs / "cmp.json").read_text())
    assert cmp["dice"]["p_value"] == 1.0 and cmp["nsd"]["p_value"] == 1.0


def test_compare_bad_json(tmp_path):
    (tmp_path / "x.json").write_text("{")
    assert run("compare", "--a", tmp_path / "x.json", "--b", tmp_path / "x.json", "--out", tmp_path / "o.json") == 1


def test_env_override(case_dirs, monkeypatch):
    monkeypatch.setenv("SEGKIT_TAU", "1.25")
    monkeypatch.setenv("SEGKIT_ITERATIONS", "30")
    out = case_dirs / "r.json"
    assert run("evaluate", "--gt-dir", case_dirs / "gt", "--pred-dir", case_dirs / "pred", "--out", out) == 0
    cfg = json.loads(out.read_text())["meta"]["config"]
    assert cfg["tau"] == 1.25 and cfg["iterations"] == 30
    # explicit flag wins
    assert run("evaluate", "--gt-dir", case_dirs / "gt", "--pred-dir", case_dirs / "pred", "--out", out, "--tau", "2") == 0
    assert json.loads(out.read_text())["meta"]["config"]["tau"] == 2.0


def test_env_override_satisfies_required(case_dirs, monkeypatch):
    monkeypatch.setenv("SEGKIT_GT_DIR", str(case_dirs / "gt"))
    monkeypatch.setenv("SEGKIT_PRED_DIR", str(case_dirs / "pred"))
    assert run("evaluate", "--out", case_dirs / "r.json", "--iterations", 10) == 0


def test_bad_env_value(monkeypatch):
    monkeypatch.setenv("SEGKIT_SUBSET", "abdomen")
    assert run("taxonomy", "dump") == 1


def test_morph(case_dirs):
    out = case_dirs / "rec.json"
    assert run("morph", "--ct", case_dirs / "ph" / "ct.nii.gz", "--seg", case_dirs / "ph" / "seg.nii.gz", "--out", out, "--age", 44) == 0
    rec = json.loads(out.read_text())
    spleen = rec["structures"]["spleen"]
    assert spleen["volume_ml"] == pytest.approx(4 / 3 * np.pi, rel=0.05)
    assert spleen["valid"] is False  # 4 ml is below the 40 ml cutoff
    assert rec["age"] == 44.0


def test_resample(case_dirs, capsys):
    out = case_dirs / "rs.nii.gz"
    assert run("resample", "--in", case_dirs / "ph" / "ct.nii.gz", "--out", out, "--spacing", 3, "--json") == 0
    assert load_volume(out).dims == (20, 20, 20)
    assert json.loads(capsys.readouterr().out)["dims_out"] == [20, 20, 20]
    assert run("resample", "--in", case_dirs / "ph" / "seg.nii.gz", "--out", out, "--kind", "label") == 1


def test_split_ribs(tmp_path):
    d = np.zeros((20, 12, 40), np.uint8)
    for z in (3, 12, 21):
        d[2:18, 2:10, z : z + 3] = 1
    save_labelmap(LabelMap(d, iso_affine()), tmp_path / "ribs.nii.gz")
    assert run("split-ribs", "--in", tmp_path / "ribs.nii.gz", "--side", "right", "--out-dir", tmp_path / "o") == 0
    files = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert files == ["rib_right_1.nii.gz", "rib_right_2.nii.gz", "rib_right_3.nii.gz"]
    top = load_volume(tmp_path / "o" / "rib_right_1.nii.gz", "label")
    assert np.nonzero(top.data)[2].min() == 21


def test_split_ribs_fragmented(tmp_path):
    d = np.zeros((10, 10, 60), np.uint8)
    for z in range(13):
        d[1:9, 1:9, 2 + 4 * z : 4 + 4 * z] = 1
    save_labelmap(LabelMap(d, iso_affine(2.0)), tmp_path / "ribs.nii")
    assert run("split-ribs", "--in", tmp_path / "ribs.nii", "--side", "left", "--out-dir", tmp_path / "o") == 1


def test_cohort_cli(tmp_path, capsys):
    spec = {"cohort": {"n": 24, "seed": 5, "trends": {"autochthon left": {"hu_slope_per_year": -1.5}}}}
    (tmp_path / "c.json").write_text(json.dumps(spec))
    assert run("phantom", "--spec", tmp_path / "c.json", "--out-dir", tmp_path / "co") == 0
    capsys.readouterr()
    assert run("cohort", "--manifest", tmp_path / "co" / "manifest.csv", "--out", tmp_path / "c.csv",
               "--report", tmp_path / "aging.json", "--json") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["records"] == 24 and summary["skipped"] == 0
    rep = json.loads((tmp_path / "aging.json").read_text())
    assert rep["n_records"] == 24
    assert rep["structures"]["autochthon left"]["hu"]["spearman_r"] < -0.5


def test_taxonomy(capsys):
    assert run("taxonomy", "lookup", "Spleen", "--json") == 0
    assert json.loads(capsys.readouterr().out)["cutoff_ml"] == 40
    assert run("taxonomy", "lookup", "splen") == 1
    assert "spleen" in capsys.readouterr().err
    assert run("taxonomy", "dump") == 0
    assert len(capsys.readouterr().out.splitlines()) == 105


def test_stats_self_test(capsys):
    assert run("stats", "self-test", "--json") == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True


def test_invariant_violation_exit_code(monkeypatch, case_dirs):
    def broken(*a, **k):
        raise cli.InvariantViolation("p-value 1.5 outside [0, 1]")

    monkeypatch.setitem(cli.COMMANDS, "taxonomy", broken)
    assert run("taxonomy", "dump") == 2


def test_dumps_format():
    text = dumps({"b": 0.1, "a": [1, 2.0, None], "n": float("nan"), "t": True})
    assert text == '{\n  "b": 0.10000000000000001,\n  "a": [1, 2.0, null],\n  "n": null,\n  "t": true\n}'


def test_docs_schema_matches_packaged_copy():
    root = Path(__file__).resolve().parents[1]
    docs = root / "docs" / "schemas" / "evaluate_report.v1.json"
    packaged = root / "src" / "segkit" / "schemas" / "evaluate_report.v1.json"
    assert docs.read_bytes() == packaged.read_bytes()
