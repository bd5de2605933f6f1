"""Tabular layouts for bounds, sweep and TTA results.

Numbers are AP percentages. Column orders follow the usual ΔAP tables:
bounds rows are ``method, AP, worst/best AP, ΔAP, AP50, worst/best AP50,
ΔAP50`` where AP is the un-shifted baseline.
"""

from __future__ import annotations

import csv
import io
from typing import Sequence

from shiftap.bounds import BoundsResult, SweepRow
from shiftap.evaluator import ApResult

BOUNDS_HEADER = ["method", "AP", "worst/best AP", "dAP", "AP50", "worst/best AP50", "dAP50"]
SWEEP_HEADER = ["max shift", "worst/best AP", "dAP", "worst/best AP50", "dAP50"]
SERIES_HEADER = ["max shift", "worst AP", "best AP", "worst AP50", "best AP50"]
TTA_HEADER = ["method", "baseline AP", "baseline AP50", "tta AP", "tta AP50", "best AP", "best AP50"]


def pct(v: float | None, precision: int = 1) -> str:
    if v is None:
        return "-"
    return f"{100 * v:.{precision}f}"


def bounds_row_from_values(
    label: str,
    baseline_ap: float,
    worst_ap: float,
    best_ap: float,
    baseline_ap50: float,
    worst_ap50: float,
    best_ap50: float,
    precision: int = 1,
) -> list[str]:
    """A bounds row from already-rounded percentages (as printed in a published table).

    The difference is taken on the rounded values and printed at the same
    precision, e.g. ``35.3/37.5`` gives ``2.2``.
    """

    def f(v):
        return f"{v:.{precision}f}"

    return [
        label,
        f(baseline_ap),
        f"{f(worst_ap)}/{f(best_ap)}",
        f(best_ap - worst_ap),
        f(baseline_ap50),
        f"{f(worst_ap50)}/{f(best_ap50)}",
        f(best_ap50 - worst_ap50),
    ]


def bounds_row(label: str, b: BoundsResult, precision: int = 1) -> list[str]:
    worst = b.ap_worst
    best = b.ap_best
    return [
        label,
        pct(b.baseline.ap, precision),
        f"{pct(worst.ap if worst else None, precision)}/{pct(best.ap if best else None, precision)}",
        pct(b.delta_ap, precision),
        pct(b.baseline.ap50, precision),
        f"{pct(worst.ap50 if worst else None, precision)}/{pct(best.ap50 if best else None, precision)}",
        pct(b.delta_ap50, precision),
    ]


def sweep_rows(rows: Sequence[SweepRow], precision: int = 1) -> list[list[str]]:
    out = []
    for r in rows:
        b = r.bounds
        if r.max_shift == 0:
            out.append(["0 - baseline", pct(b.baseline.ap, precision), "-", pct(b.baseline.ap50, precision), "-"])
            continue
        out.append(
            [
                str(r.max_shift),
                f"{pct(b.ap_worst.ap, precision)}/{pct(b.ap_best.ap, precision)}",
                pct(b.delta_ap, precision),
                f"{pct(b.ap_worst.ap50, precision)}/{pct(b.ap_best.ap50, precision)}",
                pct(b.delta_ap50, precision),
            ]
        )
    return out


def baseline_difference_series(rows: Sequence[SweepRow]) -> list[dict]:
    """Best/worst AP and AP50 minus the baseline, per max shift (plot-ready)."""
    out = []
    for r in rows:
        b = r.bounds
        base = b.baseline
        out.append(
            {
                "max_shift": r.max_shift,
                "worst_ap": b.ap_worst.ap - base.ap,
                "best_ap": b.ap_best.ap - base.ap,
                "worst_ap50": b.ap_worst.ap50 - base.ap50,
                "best_ap50": b.ap_best.ap50 - base.ap50,
            }
        )
    return out


def series_rows(series: Sequence[dict], precision: int = 1) -> list[list[str]]:
    return [
        [str(p["max_shift"]), pct(p["worst_ap"], precision), pct(p["best_ap"], precision),
         pct(p["worst_ap50"], precision), pct(p["best_ap50"], precision)]
        for p in series
    ]


def tta_row(label: str, baseline: ApResult, tta: ApResult, best: ApResult | None, precision: int = 1) -> list[str]:
    return [
        label,
        pct(baseline.ap, precision),
        pct(baseline.ap50, precision),
        pct(tta.ap, precision),
        pct(tta.ap50, precision),
        pct(best.ap if best else None, precision),
        pct(best.ap50 if best else None, precision),
    ]


def to_csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
