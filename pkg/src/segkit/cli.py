"""Command line entry point.

Every option can also be set through an environment variable named
``SEGKIT_<OPTION>`` (upper case, dashes as underscores), e.g.
``SEGKIT_TAU=2`` or ``SEGKIT_THREADS=8``.  Explicit flags win.

Exit codes: 0 success, 1 bad input or usage, 2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, grid, labelops, metrics, morphometry, oracles, phantom, report
from .taxonomy import UnknownStructureError, default_registry
from .volio import GridMismatchError, LabelMap, NiftiError, load_volume, save_labelmap, save_volume

ENV_PREFIX = "SEGKIT_"
EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2

log = logging.getLogger("segkit")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--json", action="store_true", help="print the summary as JSON")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="segkit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"segkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("resample", parents=[common], help="resample a volume to isotropic spacing")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--spacing", type=float, default=1.5, help="target spacing in mm (default 1.5)")
    p.add_argument("--mode", choices=("trilinear", "nearest"), default="trilinear")
    p.add_argument("--kind", choices=("scalar", "label"), default=None,
                   help="how to read the input (default: label for nearest, scalar otherwise)")

    p = sub.add_parser("split-ribs", parents=[common], help="split an all-ribs mask into numbered ribs")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--side", choices=("left", "right"), required=True)
    p.add_argument("--out-dir", required=True, type=Path)

    p = sub.add_parser("evaluate", parents=[common], help="Dice/NSD of predictions against ground truth")
    p.add_argument("--gt-dir", required=True, type=Path)
    p.add_argument("--pred-dir", required=True, type=Path)
    p.add_argument("--tau", type=float, default=metrics.DEFAULT_TAU_MM, help="NSD tolerance in mm (default 3)")
    p.add_argument("--subset", choices=("all", "btcv"), default="all")
    p.add_argument("--iterations", type=int, default=metrics.DEFAULT_ITERATIONS, help="bootstrap iterations")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--cases-out", type=Path, default=None, help="also write per-case metrics JSON")

    p = sub.add_parser("compare", parents=[common], help="paired signed-rank comparison of two runs")
    p.add_argument("--a", required=True, type=Path, help="per-case metrics JSON of run A")
    p.add_argument("--b", required=True, type=Path, help="per-case metrics JSON of run B")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("morph", parents=[common], help="volume and mean HU per structure for one case")
    p.add_argument("--ct", required=True, type=Path)
    p.add_argument("--seg", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--patient-id", default=None)
    p.add_argument("--age", type=float, default=float("nan"))
    p.add_argument("--sex", default="unknown")

    p = sub.add_parser("cohort", parents=[common], help="cohort extraction and aging analysis")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="cohort CSV")
    p.add_argument("--report", required=True, type=Path, help="aging analysis JSON")
    p.add_argument("--min-n", type=int, default=morphometry.MIN_RECORDS)

    p = sub.add_parser("phantom", parents=[common], help="render a phantom or phantom cohort from a JSON spec")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--out-dir", required=True, type=Path)

    p = sub.add_parser("taxonomy", parents=[common], help="structure registry")
    p.add_argument("action", choices=("dump", "lookup"))
    p.add_argument("key", nargs="?")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("stats", parents=[common], help="statistics utilities")
    p.add_argument("action", choices=("self-test",))

    _apply_env_defaults(parser)
    return parser


def _apply_env_defaults(parser: argparse.ArgumentParser) -> None:
    subparsers = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    for sp in subparsers:
        for sub in sp.choices.values():
            for action in sub._actions:
                if not action.option_strings or action.dest in ("help",):
                    continue
                env = ENV_PREFIX + action.dest.upper()
                if env not in os.environ:
                    continue
                raw = os.environ[env]
                if isinstance(action, argparse._StoreTrueAction):
                    action.default = raw.strip().lower() in ("1", "true", "yes", "on")
                    continue
                value = action.type(raw) if action.type else raw
                if action.choices and value not in action.choices:
                    raise UsageError(f"{env}={raw!r} is not one of {list(action.choices)}")
                action.default = value
                action.required = False


# --------------------------------------------------------------------------
# helpers


def _emit(args, summary: dict, text: str) -> None:
    if args.json:
        print(report.dumps(summary))
    else:
        print(text)


# settings that never change report content; kept out of the embedded config
# so reports stay byte-identical across thread counts and output locations
_NOT_CONFIG = frozenset({"json", "threads", "out", "out_dir", "cases_out", "report"})


def _config(args) -> dict:
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in _NOT_CONFIG:
            continue
        cfg[k] = str(v) if isinstance(v, Path) else v
    return cfg


def _nifti_files(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise InputError(f"not a directory: {d}")
    out = {}
    for p in sorted(d.iterdir()):
        for suffix in (".nii.gz", ".nii"):
            if p.name.endswith(suffix):
                out[p.name[: -len(suffix)]] = p
                break
    return out


def _check_unit(x, what):
    if x is not None and not (0.0 <= x <= 1.0):
        raise InvariantViolation(f"{what} = {x!r} outside [0, 1]")


def _check_ci(ci: metrics.MeanCI, what: str):
    if ci.mean is None:
        return
    _check_unit(ci.mean, what)
    if not (ci.lower - 1e-12 <= ci.mean <= ci.upper + 1e-12):
        raise InvariantViolation(f"{what}: CI [{ci.lower}, {ci.upper}] does not contain mean {ci.mean}")


# --------------------------------------------------------------------------
# commands


def cmd_resample(args) -> int:
    kind = args.kind or ("label" if args.mode == "nearest" else "scalar")
    if kind == "label" and args.mode != "nearest":
        raise InputError("label maps can only be resampled with --mode nearest")
    src = load_volume(args.input, kind, max_label=default_registry().max_id)
    target = grid.build_target_grid(src, args.spacing)
    out = grid.resample(src, target, mode=args.mode, threads=args.threads)
    if kind == "label":
        if not set(np.unique(out.data)) <= set(np.unique(src.data)) | {0}:
            raise InvariantViolation("nearest resampling introduced new labels")
        save_labelmap(out, args.out)
    else:
        save_volume(out, args.out)
    summary = {"input": str(args.input), "output": str(args.out), "dims_in": list(src.dims),
               "dims_out": list(out.dims), "spacing": args.spacing, "mode": args.mode}
    _emit(args, summary, f"resampled {src.dims} -> {out.dims} at {args.spacing} mm ({args.mode}) -> {args.out}")
    return EXIT_OK


def cmd_split_ribs(args) -> int:
    lab = load_volume(args.input, "label", max_label=default_registry().max_id)
    mask = labelops.BinaryMask(lab.data != 0, lab.affine)
    try:
        ribs = labelops.split_rib_instances(mask, args.side)
    except labelops.FragmentedInputError as exc:
        raise InputError(str(exc)) from exc
    args.out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for number, m in ribs:
        path = args.out_dir / f"rib_{args.side}_{number}.nii.gz"
        save_labelmap(LabelMap(m.data.astype(np.uint8), m.affine), path)
        files.append({"rib": number, "path": str(path), "voxels": m.count()})
    _emit(args, {"side": args.side, "ribs": files}, f"{len(files)} {args.side} ribs written to {args.out_dir}")
    return EXIT_OK


def evaluation_report(agg: metrics.AggregateReport, structures, args) -> dict:
    out = {}
    for s in structures:
        e = agg.structures.get(s.id, {"dice": metrics.MeanCI(None, None, None, 0), "nsd": metrics.MeanCI(None, None, None, 0)})
        _check_ci(e["dice"], f"{s.name} dice")
        _check_ci(e["nsd"], f"{s.name} nsd")
        out[s.name] = {
            "dice": e["dice"].mean,
            "nsd": e["nsd"].mean,
            "dice_ci": [e["dice"].lower, e["dice"].upper],
            "nsd_ci": [e["nsd"].lower, e["nsd"].upper],
            "n": e["dice"].n,
        }
    od, on = agg.overall["dice"], agg.overall["nsd"]
    _check_ci(od, "overall dice")
    _check_ci(on, "overall nsd")
    out["overall"] = {
        "dice": od.mean,
        "dice_ci_lower": od.lower,
        "dice_ci_upper": od.upper,
        "nsd": on.mean,
        "nsd_ci_lower": on.lower,
        "nsd_ci_upper": on.upper,
        "n_cases": agg.n_cases,
        "ci_level": agg.level,
        "ci_method": "percentile bootstrap over cases",
        "bootstrap_iterations": agg.iterations,
        "seed": agg.seed,
        "averaging": "per-case mean over scored structures, then mean over cases",
    }
    out["meta"] = report.provenance("evaluate", _config(args))
    return out


def cmd_evaluate(args) -> int:
    registry = default_registry()
    if args.tau <= 0:
        raise InputError("--tau must be positive")
    if args.iterations < 1:
        raise InputError("--iterations must be >= 1")
    gts, preds = _nifti_files(args.gt_dir), _nifti_files(args.pred_dir)
    if not gts:
        raise InputError(f"no NIfTI files in {args.gt_dir}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise InputError(f"no prediction for case(s): {missing[:10]}")
    pairs = []
    for cid in sorted(gts):
        gt = load_volume(gts[cid], "label", max_label=registry.max_id)
        pred = load_volume(preds[cid], "label", max_label=registry.max_id)
        if gt.dims != pred.dims or not np.allclose(gt.affine, pred.affine, atol=1e-6):
            pred = grid.resample_to(pred, gt, mode="nearest")
        pairs.append((cid, gt, pred))
    cases = metrics.evaluate_many(pairs, registry, args.tau, args.subset, args.threads)
    structures = registry.select(args.subset)
    agg = metrics.aggregate(cases, args.iterations, args.seed, threads=args.threads,
                            structure_ids=[s.id for s in structures])
    rep = evaluation_report(agg, structures, args)
    if args.cases_out:
        report.write_json(args.cases_out, {"meta": report.provenance("evaluate", _config(args)),
                                           "cases": [c.to_dict(registry) for c in cases]})
    report.write_json(args.out, rep)
    o = rep["overall"]
    text = (f"{agg.n_cases} cases, {len(structures)} structures: "
            f"Dice {o['dice']:.4f} [{o['dice_ci_lower']:.4f}, {o['dice_ci_upper']:.4f}], "
            f"NSD {o['nsd']:.4f} [{o['nsd_ci_lower']:.4f}, {o['nsd_ci_upper']:.4f}]"
            if o["dice"] is not None else f"{agg.n_cases} cases: no scored structures")
    _emit(args, {"report": str(args.out), "overall": o}, text)
    return EXIT_OK


def _load_cases(path: Path) -> list[metrics.CaseMetrics]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "cases" not in doc:
        raise InputError(f"{path}: expected an object with a 'cases' list (see evaluate --cases-out)")
    return [metrics.CaseMetrics.from_dict(c) for c in doc["cases"]]


def cmd_compare(args) -> int:
    a, b = _load_cases(args.a), _load_cases(args.b)
    res = metrics.compare_runs(a, b)
    out = {}
    for m in ("dice", "nsd"):
        r = getattr(res, m)
        if not 0.0 <= r.p_value <= 1.0:
            raise InvariantViolation(f"{m} p-value {r.p_value} outside [0, 1]")
        out[m] = {
            "p_value": r.p_value,
            "significant": res.significant(m),
            "statistic_w_plus": r.statistic,
            "n_effective": r.n[0],
            "n_pairs": res.n_pairs[m],
            "mean_a": res.means[m]["a"],
            "mean_b": res.means[m]["b"],
            "method": "two-sided Wilcoxon signed-rank on per-case means; " + r.method_note,
        }
    out["alpha"] = 0.05
    out["meta"] = report.provenance("compare", _config(args))
    report.write_json(args.out, out)
    text = "\n".join(
        f"{m}: mean A {out[m]['mean_a']} vs B {out[m]['mean_b']}, p = {out[m]['p_value']:.6g}" for m in ("dice", "nsd")
    )
    _emit(args, {k: out[k] for k in ("dice", "nsd")}, text)
    return EXIT_OK


def cmd_morph(args) -> int:
    registry = default_registry()
    ct = load_volume(args.ct, "scalar")
    seg = load_volume(args.seg, "label", max_label=registry.max_id)
    pid = args.patient_id or args.ct.name.split(".")[0]
    rec = morphometry.make_record(pid, args.age, args.sex, ct, seg, registry)
    doc = morphometry.record_to_dict(rec, registry)
    if math.isnan(rec.age):
        doc["age"] = None
    doc["meta"] = report.provenance("morph", _config(args))
    report.write_json(args.out, doc)
    present = sum(1 for m in rec.measures.values() if m.volume_ml > 0)
    valid = sum(1 for m in rec.measures.values() if m.valid)
    _emit(args, {"record": str(args.out), "present": present, "valid": valid},
          f"{present} structures present, {valid} pass the plausibility cutoff -> {args.out}")
    return EXIT_OK


def cmd_cohort(args) -> int:
    registry = default_registry()
    entries = morphometry.read_manifest(args.manifest)
    try:
        records, skipped = morphometry.cohort_extract(entries, registry, args.threads)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if not records:
        raise InputError("no case could be processed")
    aging = morphometry.aging_analysis(records, registry, min_n=args.min_n)
    doc = morphometry.aging_report_to_dict(aging, registry)
    for per in aging.results.values():
        for r in per.values():
            for p in (r.spearman_p, r.kruskal_p, *r.posthoc_p.values()):
                if p is not None and not 0.0 <= p <= 1.0:
                    raise InvariantViolation(f"p-value {p} outside [0, 1]")
    doc["skipped_cases"] = [{"patient_id": s.patient_id, "reason": s.reason} for s in skipped]
    doc["meta"] = report.provenance("cohort", _config(args))
    morphometry.write_cohort_csv(records, args.out, registry)
    report.write_json(args.report, doc)
    flagged = sorted(
        f"{name}/{q}" for name, per in doc["structures"].items() for q, r in per.items() if r["spearman_significant"]
    )
    _emit(args, {"records": len(records), "skipped": len(skipped), "significant": flagged},
          f"{len(records)} records ({len(skipped)} skipped); significant age correlations: {', '.join(flagged) or 'none'}")
    return EXIT_OK


def cmd_phantom(args) -> int:
    try:
        spec_doc = json.loads(args.spec.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.spec}: invalid JSON ({exc})") from exc
    args.out_dir.mkdir(parents=True, exist_ok=True)
    if "cohort" in spec_doc:
        cohort = phantom.cohort_from_dict(spec_doc)
        manifest = phantom.write_cohort(cohort, args.out_dir)
        _emit(args, {"manifest": str(manifest), "cases": len(cohort.cases)},
              f"{len(cohort.cases)} phantom cases written; manifest {manifest}")
        return EXIT_OK
    spec = phantom.spec_from_dict(spec_doc)
    ct_path, seg_path, truth = phantom.write_case(spec, args.out_dir)
    report.write_json(args.out_dir / "truth.json", {"structures": phantom.truth_to_dict(truth)})
    _emit(args, {"ct": str(ct_path), "seg": str(seg_path), "structures": len(truth)},
          f"phantom with {len(truth)} structures -> {ct_path}, {seg_path}")
    return EXIT_OK


def cmd_taxonomy(args) -> int:
    registry = default_registry()
    if args.action == "dump":
        text = registry.to_csv()
        if args.out:
            report.atomic_write_text(args.out, text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if not args.key:
        raise UsageError("taxonomy lookup needs a KEY")
    s = registry.lookup(int(args.key) if args.key.isdigit() else args.key)
    info = {"id": s.id, "name": s.name, "group": s.group, "part": s.part, "cutoff_ml": s.cutoff_ml, "btcv": s.btcv}
    _emit(args, info, f"{s.id}: {s.name} ({s.group}, part {s.part}, cutoff {s.cutoff_ml:g} ml)")
    return EXIT_OK


def cmd_stats(args) -> int:
    results = oracles.run_self_test(args.seed)
    ok = all(r[1] for r in results)
    summary = {"passed": ok, "checks": [{"name": n, "passed": bool(p), "detail": d} for n, p, d in results]}
    _emit(args, summary, "\n".join(f"{'PASS' if p else 'FAIL'}  {n}  ({d})" for n, p, d in results))
    return EXIT_OK if ok else EXIT_INTERNAL


COMMANDS = {
    "resample": cmd_resample,
    "split-ribs": cmd_split_ribs,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "morph": cmd_morph,
    "cohort": cmd_cohort,
    "phantom": cmd_phantom,
    "taxonomy": cmd_taxonomy,
    "stats": cmd_stats,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage() + "segkit: error: a command is required")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INPUT
    except (InputError, FileNotFoundError, NiftiError, GridMismatchError, UnknownStructureError,
            phantom.OverlapError, PermissionError, IsADirectoryError) as exc:
        print(f"segkit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InvariantViolation, AssertionError) as exc:
        print(f"segkit: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except KeyError as exc:
        print(f"segkit: error: missing or unknown field {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        # malformed content that slipped past the explicit checks
        print(f"segkit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
