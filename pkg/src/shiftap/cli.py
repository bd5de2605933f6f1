"""Command-line entry point: ``shiftap <command> ...``.

Exit codes: 0 success, 2 input error, 3 enumeration cap exceeded.
Data goes to stdout (or ``--out``); progress and diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from shiftap import __version__
from shiftap.bounds import (
    MAXIMIZE,
    MINIMIZE,
    GreedyConfig,
    InstanceTooLarge,
    brute_force_extremes,
    compute_bounds,
    greedy_bounds,
    sweep_shift_range,
)
from shiftap.dataset import (
    DatasetError,
    ShiftedPredictionSet,
    emit_shift_manifest,
    infer_max_shift,
    load_ground_truth,
    load_predictions,
    read_json,
    write_json,
)
from shiftap.evaluator import EvalConfig, EvaluationError, compute_ap, match_cells
from shiftap.geometry import Shift, ShiftGrid
from shiftap import report
from shiftap.simulate import SimConfig, describe, generate_dataset, write_dataset
from shiftap.tta import NmsConfig, as_prediction_set, tta_aggregate, to_records

log = logging.getLogger("shiftap")

EXIT_INPUT = 2
EXIT_CAP = 3
THREADS_ENV = "SHIFTAP_THREADS"


class InputError(Exception):
    pass


def _dump(payload) -> str:
    return json.dumps(payload, indent=1) + "\n"


def _emit(payload, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(_dump(payload))
        log.info("wrote %s", out)
    else:
        sys.stdout.write(_dump(payload))


def _write(directory: Path, name: str, text: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / name).write_text(text)
    log.info("wrote %s", directory / name)


def _report(command: str, config: dict, inputs: dict, results) -> dict:
    return {
        "tool": "shiftap",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "results": results,
    }


def _parse_shift(text: str) -> Shift:
    try:
        dx, dy = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected DX,DY, got {text!r}") from None
    return Shift(dx, dy)


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _eval_config(args) -> EvalConfig:
    return EvalConfig(max_dets_per_image=args.max_dets)


def _load(args, max_shift: int | None = None, default_shift: Shift | None = None):
    gt = load_ground_truth(args.gt)
    m = max_shift if max_shift is not None else infer_max_shift(args.pred)
    pset = load_predictions(args.pred, ShiftGrid(m), frame=args.frame, image_ids=gt.images, default_shift=default_shift)
    return gt, pset


def _require_complete(pset: ShiftedPredictionSet, allow_missing: bool) -> None:
    missing = pset.missing_cells()
    if missing and not allow_missing:
        shown = ", ".join(f"(image {i}, shift {s.dx},{s.dy})" for i, s in missing[:20])
        more = f" and {len(missing) - 20} more" if len(missing) > 20 else ""
        raise InputError(f"incomplete prediction grid: {len(missing)} missing cells: {shown}{more}")


def _directions(name: str) -> tuple[str, ...]:
    return {"both": (MAXIMIZE, MINIMIZE), "max": (MAXIMIZE,), "min": (MINIMIZE,)}[name]


# -- commands --------------------------------------------------------------


def cmd_eval(args) -> int:
    gt, pset = _load(args, args.max_shift, default_shift=args.shift)
    if args.assignment:
        raw = read_json(args.assignment)
        try:
            if isinstance(raw, dict):
                selection = {int(k): Shift(*map(int, v)) for k, v in raw.items()}
            else:
                selection = {int(r["image_id"]): Shift(*map(int, r["shift"])) for r in raw}
        except (KeyError, TypeError, ValueError):
            raise DatasetError("assignment must map image_id to [dx, dy]", args.assignment) from None
    else:
        selection = {i: args.shift for i in pset.image_ids}
    cfg = _eval_config(args)
    result = compute_ap(selection, pset, gt, cfg)
    payload = _report(
        "eval",
        {"eval": cfg.to_json(), "max_shift": pset.grid.max_shift, "frame": args.frame,
         "shift": args.shift.as_list() if not args.assignment else None},
        {"gt": args.gt, "pred": args.pred, "assignment": args.assignment},
        result.to_json(),
    )
    _emit(payload, args.out)
    return 0


def cmd_bounds(args) -> int:
    gt, pset = _load(args, args.max_shift)
    _require_complete(pset, args.allow_missing)
    cfg = _eval_config(args)
    gcfg = GreedyConfig(iterations=args.iterations, objective=args.objective)
    result = compute_bounds(pset, gt, cfg, gcfg, _directions(args.direction), threads=args.threads)
    n_dir = len(_directions(args.direction))
    results = result.to_json()
    results["eval_count_total"] = result.eval_count * n_dir
    payload = _report(
        "bounds",
        {"eval": cfg.to_json(), "greedy": gcfg.to_json(), "direction": args.direction,
         "max_shift": args.max_shift, "frame": args.frame, "allow_missing": args.allow_missing},
        {"gt": args.gt, "pred": args.pred},
        results,
    )
    csv_text = report.to_csv(report.BOUNDS_HEADER, [report.bounds_row(args.label, result, args.precision)])
    if args.out:
        out = Path(args.out)
        _write(out, "bounds.json", _dump(payload))
        _write(out, "bounds.csv", csv_text)
    else:
        sys.stdout.write(_dump(payload))
        sys.stdout.write(csv_text)
    return 0


def cmd_oracle(args) -> int:
    gt, pset = _load(args, args.max_shift)
    _require_complete(pset, args.allow_missing)
    cfg = _eval_config(args)
    matches = match_cells(pset, gt, cfg, args.threads)
    exact = brute_force_extremes(pset, gt, cfg, cap=args.cap, matches=matches)
    greedy = {
        d: greedy_bounds(pset, gt, cfg, GreedyConfig(iterations=args.iterations, direction=d), matches=matches)
        for d in (MAXIMIZE, MINIMIZE)
    }

    def side(d):
        ap_exact, a_exact = exact[d]
        g = greedy[d]
        gap = ap_exact.ap50 - g.result.ap50 if d == MAXIMIZE else g.result.ap50 - ap_exact.ap50
        return {
            "greedy_ap50": g.result.ap50,
            "oracle_ap50": ap_exact.ap50,
            "gap_ap50": gap,
            "greedy_ap": g.result.ap,
            "oracle_ap": ap_exact.ap,
            "greedy_assignment": [{"image_id": i, "shift": g.assignment[i].as_list()} for i in sorted(g.assignment)],
            "oracle_assignment": [{"image_id": i, "shift": a_exact[i].as_list()} for i in sorted(a_exact)],
            "eval_count": g.eval_count,
        }

    payload = _report(
        "oracle",
        {"eval": cfg.to_json(), "max_shift": args.max_shift, "iterations": args.iterations, "cap": args.cap,
         "frame": args.frame},
        {"gt": args.gt, "pred": args.pred},
        {
            "n_images": len(pset.image_ids),
            "n_assignments": len(pset.grid) ** len(pset.image_ids),
            "best": side(MAXIMIZE),
            "worst": side(MINIMIZE),
        },
    )
    _emit(payload, args.out)
    return 0


def cmd_tta(args) -> int:
    gt, pset = _load(args, args.max_shift)
    _require_complete(pset, args.allow_missing)
    cfg = _eval_config(args)
    ncfg = NmsConfig(iou_threshold=args.nms_iou, class_aware=not args.class_agnostic)
    matches = match_cells(pset, gt, cfg, args.threads)
    baseline = compute_ap({i: Shift(0, 0) for i in pset.image_ids}, pset, gt, cfg, matches=matches)
    aggregated = tta_aggregate(pset, ncfg)
    tset = as_prediction_set(aggregated)
    tta = compute_ap({i: Shift(0, 0) for i in tset.image_ids}, tset, gt, cfg)
    best = greedy_bounds(pset, gt, cfg, GreedyConfig(), matches=matches).result
    payload = _report(
        "tta",
        {"eval": cfg.to_json(), "nms": {"iou_threshold": ncfg.iou_threshold, "class_aware": ncfg.class_aware},
         "max_shift": args.max_shift, "frame": args.frame},
        {"gt": args.gt, "pred": args.pred},
        {"baseline": baseline.to_json(), "tta": tta.to_json(), "best": best.to_json()},
    )
    csv_text = report.to_csv(report.TTA_HEADER, [report.tta_row(args.label, baseline, tta, best, args.precision)])
    if args.out:
        out = Path(args.out)
        _write(out, "tta.json", _dump(payload))
        _write(out, "tta.csv", csv_text)
        _write(out, "tta_predictions.json", _dump(to_records(aggregated)))
    else:
        sys.stdout.write(_dump(payload))
        sys.stdout.write(csv_text)
    return 0


def cmd_sweep(args) -> int:
    gt = load_ground_truth(args.gt)
    per_m: dict[int, str] = {}
    shared = None
    for item in args.pred:
        if "=" in item:
            m, path = item.split("=", 1)
            per_m[int(m)] = path
        else:
            shared = item
    sets = {}
    for m in args.shifts:
        path = per_m.get(m, shared)
        if path is None:
            raise InputError(f"no prediction directory for max shift {m}")
        pset = load_predictions(path, ShiftGrid(max(m, infer_max_shift(path))), frame=args.frame, image_ids=gt.images)
        pset = pset.restrict(ShiftGrid(m))
        _require_complete(pset, args.allow_missing)
        sets[m] = pset
    cfg = _eval_config(args)
    gcfg = GreedyConfig(iterations=args.iterations)
    rows = sweep_shift_range(sets, gt, args.shifts, cfg, gcfg, method=args.method, cap=args.cap, threads=args.threads)
    series = report.baseline_difference_series(rows)
    payload = _report(
        "sweep",
        {"eval": cfg.to_json(), "greedy": gcfg.to_json(), "method": args.method, "shifts": args.shifts,
         "frame": args.frame},
        {"gt": args.gt, "pred": args.pred},
        {
            "rows": [{"max_shift": r.max_shift, **r.bounds.to_json()} for r in rows],
            "baseline_difference": series,
        },
    )
    table = report.to_csv(report.SWEEP_HEADER, report.sweep_rows(rows, args.precision))
    series_csv = report.to_csv(report.SERIES_HEADER, report.series_rows(series, args.precision))
    if args.out:
        out = Path(args.out)
        _write(out, "sweep.json", _dump(payload))
        _write(out, "sweep.csv", table)
        _write(out, "series.csv", series_csv)
    else:
        sys.stdout.write(_dump(payload))
        sys.stdout.write(table)
    return 0


SIM_FLAGS = {
    "n_images": int, "image_size": int, "n_categories": int, "objects_min": int, "objects_max": int,
    "max_shift": int, "score_base": float, "box_jitter_sigma": float, "score_jitter_sigma": float,
    "drop_mode": str, "drop_p": float, "fp_rate": float, "fp_score_max": float, "seed": int,
}


def cmd_simulate(args) -> int:
    data = {}
    if args.config:
        data = read_json(args.config)
        if not isinstance(data, dict):
            raise DatasetError("simulator config must be a JSON object", args.config)
    for name in SIM_FLAGS:
        v = getattr(args, name)
        if v is not None:
            data[name] = v
    cfg = SimConfig.from_json(data)
    gt, pset, manifest = generate_dataset(cfg, threads=args.threads)
    write_dataset(args.out, cfg, gt, pset, manifest)
    summary = describe(cfg)
    summary["realized_detections"] = sum(len(v) for v in pset.cells.values())
    summary["realized_objects"] = len(gt.annotations)
    _emit(_report("simulate", {"sim": cfg.to_json()}, {"out": args.out}, summary), None)
    return 0


def cmd_manifest(args) -> int:
    gt = load_ground_truth(args.gt)
    manifest = emit_shift_manifest(gt.images, ShiftGrid(args.max_shift), args.padding)
    _emit(manifest.to_json(), args.out)
    return 0


# -- parser ----------------------------------------------------------------


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker threads (default: ${THREADS_ENV} or 1); never changes results")
    common.add_argument("--quiet", action="store_true", help="suppress progress on stderr")

    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("gt", help="COCO ground-truth JSON")
    inputs.add_argument("pred", help="directory of shift_<dx>_<dy>.json files or a results file")
    inputs.add_argument("--frame", choices=("shifted", "canonical"), default="shifted",
                        help="coordinate frame of the prediction boxes")
    inputs.add_argument("--max-dets", type=int, default=100, help="max detections per image and category")

    tables = argparse.ArgumentParser(add_help=False)
    tables.add_argument("--label", default="detector", help="method label for CSV rows")
    tables.add_argument("--precision", type=int, default=1, help="decimals of CSV percentages")
    tables.add_argument("--allow-missing", action="store_true", help="treat missing cells as empty")

    p = argparse.ArgumentParser(prog="shiftap", description="Shift-equivariance AP bounds for object detectors.")
    p.add_argument("--version", action="version", version=f"shiftap {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("eval", parents=[common, inputs], help="COCO AP of one shift or an explicit assignment")
    e.add_argument("--max-shift", type=int, default=None, help="grid size (default: inferred)")
    e.add_argument("--shift", type=_parse_shift, default=Shift(0, 0), help="DX,DY used for every image")
    e.add_argument("--assignment", help="JSON mapping image_id to [dx, dy]")
    e.add_argument("--out", help="write the report here instead of stdout")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bounds", parents=[common, inputs, tables], help="greedy best/worst AP over shifts")
    b.add_argument("--max-shift", type=int, required=True)
    b.add_argument("--iterations", type=int, default=1)
    b.add_argument("--direction", choices=("both", "max", "min"), default="both")
    b.add_argument("--objective", choices=("ap50", "ap"), default="ap50")
    b.add_argument("--out", help="output directory for bounds.json and bounds.csv")
    b.set_defaults(func=cmd_bounds)

    o = sub.add_parser("oracle", parents=[common, inputs], help="greedy vs exhaustive search on small sets")
    o.add_argument("--max-shift", type=int, required=True)
    o.add_argument("--iterations", type=int, default=1)
    o.add_argument("--cap", type=int, default=10**6, help="max number of assignments to enumerate")
    o.add_argument("--allow-missing", action="store_true")
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    t = sub.add_parser("tta", parents=[common, inputs, tables], help="NMS-pooled predictions over all shifts")
    t.add_argument("--max-shift", type=int, required=True)
    t.add_argument("--nms-iou", type=float, default=0.5)
    t.add_argument("--class-agnostic", action="store_true")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_tta)

    s = sub.add_parser("sweep", parents=[common, tables], help="bounds for increasing max shift")
    s.add_argument("gt")
    s.add_argument("pred", nargs="+", help="DIR used for every M, or M=DIR entries")
    s.add_argument("--shifts", type=_parse_int_list, default=[0, 1, 3, 7, 15])
    s.add_argument("--frame", choices=("shifted", "canonical"), default="shifted")
    s.add_argument("--max-dets", type=int, default=100)
    s.add_argument("--iterations", type=int, default=1)
    s.add_argument("--method", choices=("greedy", "brute"), default="greedy")
    s.add_argument("--cap", type=int, default=10**6)
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_sweep)

    sim = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    sim.add_argument("--config", help="JSON file with simulator fields")
    for name, typ in SIM_FLAGS.items():
        sim.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=cmd_simulate)

    m = sub.add_parser("manifest", parents=[common], help="shift manifest for an image set")
    m.add_argument("gt")
    m.add_argument("--max-shift", type=int, required=True)
    m.add_argument("--padding", choices=("minimal", "global"), default="minimal")
    m.add_argument("--out")
    m.set_defaults(func=cmd_manifest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    start = time.perf_counter()
    try:
        code = args.func(args)
    except InstanceTooLarge as exc:
        print(f"shiftap: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (DatasetError, EvaluationError, InputError, KeyError, ValueError) as exc:
        print(f"shiftap: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
