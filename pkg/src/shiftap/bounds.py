"""Best/worst achievable AP over per-image shift assignments.

The greedy search visits images one at a time, tries every shift of the
grid with all other images held fixed, and keeps the one that maximises (or
minimises) AP50. An exhaustive oracle enumerates every assignment on small
instances so the greedy answer can be bracketed.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from shiftap.dataset import GroundTruth, ShiftedPredictionSet
from shiftap.evaluator import ApResult, EvalCache, EvalConfig, compute_ap, match_cells
from shiftap.geometry import Shift, ShiftGrid

log = logging.getLogger(__name__)

MAXIMIZE = "maximize"
MINIMIZE = "minimize"


class InstanceTooLarge(RuntimeError):
    pass


ShiftAssignment = dict  # image_id -> Shift


@dataclass(frozen=True)
class GreedyConfig:
    iterations: int = 1
    objective: str = "ap50"
    direction: str = MAXIMIZE
    early_stop: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.objective not in ("ap50", "ap"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.direction not in (MAXIMIZE, MINIMIZE):
            raise ValueError(f"direction must be {MAXIMIZE!r} or {MINIMIZE!r}")

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "objective": self.objective,
            "direction": self.direction,
            "early_stop": self.early_stop,
        }


@dataclass
class GreedyResult:
    result: ApResult
    assignment: dict[int, Shift]
    eval_count: int
    iterations_run: int
    # objective after initialisation and after each full sweep
    history: list[float] = field(default_factory=list)
    # objective after each per-image decision
    trace: list[float] = field(default_factory=list)


def _objective(result: ApResult, objective: str) -> float:
    return result.ap50 if objective == "ap50" else result.ap


def greedy_bounds(
    pset: ShiftedPredictionSet,
    gt: GroundTruth,
    eval_config: EvalConfig = EvalConfig(),
    greedy_config: GreedyConfig = GreedyConfig(),
    matches=None,
    threads: int = 1,
) -> GreedyResult:
    """Coordinate search for the best (or worst) shift of each image.

    All images start at (0, 0) and are visited by ascending image_id. The
    incumbent is kept when it ties the best candidate; otherwise the first
    best shift in (dy, dx) order wins.
    """
    if not pset.image_ids:
        raise ValueError("empty image set")
    cache = EvalCache(pset, gt, eval_config, threads=threads, matches=matches)
    shifts = list(pset.grid)
    obj = greedy_config.objective
    live = [eval_config.ap50_index] if obj == "ap50" else None
    better = max if greedy_config.direction == MAXIMIZE else min

    history = [_objective(cache.current_result(), obj)]
    trace = []
    iterations_run = 0
    for k in range(greedy_config.iterations):
        changed = False
        for image_id in pset.image_ids:
            values = cache.candidate_objectives(image_id, shifts, obj)
            target = better(values)
            incumbent = cache.assignment[image_id]
            if values[shifts.index(incumbent)] == target:
                choice = incumbent
            else:
                choice = shifts[values.index(target)]
            if choice != incumbent:
                cache.commit_swap(image_id, choice, thresholds=live)
                changed = True
            trace.append(target)
        iterations_run += 1
        history.append(trace[-1])
        log.info("greedy %s sweep %d: %s=%.6f", greedy_config.direction, k + 1, obj, trace[-1])
        if greedy_config.early_stop and not changed:
            break
    return GreedyResult(
        result=cache.current_result(),
        assignment=dict(cache.assignment),
        eval_count=cache.eval_count,
        iterations_run=iterations_run,
        history=history,
        trace=trace,
    )


def _enumerate(pset, gt, eval_config, matches, cap):
    n = len(pset.image_ids)
    total = len(pset.grid) ** n
    if total > cap:
        raise InstanceTooLarge(f"instance too large: {total} assignments exceeds cap {cap}")
    shifts = list(pset.grid)
    t50 = [eval_config.ap50_index]
    for combo in itertools.product(shifts, repeat=n):
        selection = dict(zip(pset.image_ids, combo))
        yield selection, compute_ap(selection, pset, gt, eval_config, matches=matches, thresholds=t50).ap50


def brute_force_extremes(
    pset: ShiftedPredictionSet,
    gt: GroundTruth,
    eval_config: EvalConfig = EvalConfig(),
    cap: int = 10**6,
    matches=None,
) -> dict[str, tuple[ApResult, dict[int, Shift]]]:
    """Exact AP50 maximiser and minimiser in one enumeration.

    Ties go to the lexicographically smallest assignment (images ascending,
    shifts in (dy, dx) order), i.e. the first one enumerated.
    """
    if matches is None:
        matches = match_cells(pset, gt, eval_config)
    best = worst = None
    for selection, value in _enumerate(pset, gt, eval_config, matches, cap):
        if best is None or value > best[1]:
            best = (selection, value)
        if worst is None or value < worst[1]:
            worst = (selection, value)
    return {
        MAXIMIZE: (compute_ap(best[0], pset, gt, eval_config, matches=matches), best[0]),
        MINIMIZE: (compute_ap(worst[0], pset, gt, eval_config, matches=matches), worst[0]),
    }


def brute_force_bounds(
    pset: ShiftedPredictionSet,
    gt: GroundTruth,
    eval_config: EvalConfig = EvalConfig(),
    direction: str = MAXIMIZE,
    cap: int = 10**6,
    matches=None,
) -> tuple[ApResult, dict[int, Shift]]:
    return brute_force_extremes(pset, gt, eval_config, cap=cap, matches=matches)[direction]


def delta_ap(best: ApResult, worst: ApResult) -> tuple[float, float]:
    return best.ap - worst.ap, best.ap50 - worst.ap50


@dataclass
class BoundsResult:
    baseline: ApResult
    ap_best: ApResult | None
    ap_worst: ApResult | None
    assignment_best: dict[int, Shift] | None
    assignment_worst: dict[int, Shift] | None
    eval_count: int
    iterations_run: int
    history_best: list[float] = field(default_factory=list)
    history_worst: list[float] = field(default_factory=list)

    @property
    def delta_ap(self) -> float | None:
        if self.ap_best is None or self.ap_worst is None:
            return None
        return delta_ap(self.ap_best, self.ap_worst)[0]

    @property
    def delta_ap50(self) -> float | None:
        if self.ap_best is None or self.ap_worst is None:
            return None
        return delta_ap(self.ap_best, self.ap_worst)[1]

    def to_json(self) -> dict:
        def assignment(a):
            if a is None:
                return None
            return [{"image_id": i, "shift": a[i].as_list()} for i in sorted(a)]

        return {
            "baseline": self.baseline.to_json(),
            "best": None if self.ap_best is None else self.ap_best.to_json(),
            "worst": None if self.ap_worst is None else self.ap_worst.to_json(),
            "delta_ap": self.delta_ap,
            "delta_ap50": self.delta_ap50,
            "eval_count": self.eval_count,
            "iterations_run": self.iterations_run,
            "history_best": self.history_best,
            "history_worst": self.history_worst,
            "assignment_best": assignment(self.assignment_best),
            "assignment_worst": assignment(self.assignment_worst),
        }


def compute_bounds(
    pset: ShiftedPredictionSet,
    gt: GroundTruth,
    eval_config: EvalConfig = EvalConfig(),
    greedy_config: GreedyConfig = GreedyConfig(),
    directions: Sequence[str] = (MAXIMIZE, MINIMIZE),
    threads: int = 1,
) -> BoundsResult:
    """Greedy best and/or worst AP, each search starting from (0, 0).

    ``eval_count`` is the number of candidate evaluations of one direction.
    """
    matches = match_cells(pset, gt, eval_config, threads)
    baseline = compute_ap({i: Shift(0, 0) for i in pset.image_ids}, pset, gt, eval_config, matches=matches)
    runs = {}
    for d in directions:
        cfg = GreedyConfig(greedy_config.iterations, greedy_config.objective, d, greedy_config.early_stop)
        runs[d] = greedy_bounds(pset, gt, eval_config, cfg, matches=matches, threads=threads)
    best, worst = runs.get(MAXIMIZE), runs.get(MINIMIZE)
    any_run = best or worst
    return BoundsResult(
        baseline=baseline,
        ap_best=best.result if best else None,
        ap_worst=worst.result if worst else None,
        assignment_best=best.assignment if best else None,
        assignment_worst=worst.assignment if worst else None,
        eval_count=any_run.eval_count if any_run else 0,
        iterations_run=max((r.iterations_run for r in runs.values()), default=0),
        history_best=best.history if best else [],
        history_worst=worst.history if worst else [],
    )


@dataclass
class SweepRow:
    max_shift: int
    bounds: BoundsResult

    @property
    def baseline(self) -> ApResult:
        return self.bounds.baseline


def sweep_shift_range(
    sets: Mapping[int, ShiftedPredictionSet],
    gt: GroundTruth,
    max_shifts: Sequence[int],
    eval_config: EvalConfig = EvalConfig(),
    greedy_config: GreedyConfig = GreedyConfig(),
    method: str = "greedy",
    cap: int = 10**6,
    threads: int = 1,
) -> list[SweepRow]:
    """Bounds for each requested maximum shift.

    ``sets`` maps M to the prediction set for that grid. A set built for a
    larger grid is accepted and restricted. ``method="brute"`` uses the
    exhaustive oracle instead of the greedy search.
    """
    rows = []
    for m in max_shifts:
        pset = sets.get(m)
        if pset is None:
            larger = [k for k in sets if k >= m]
            if not larger:
                raise KeyError(f"no prediction set for max shift {m}")
            pset = sets[min(larger)]
        if pset.grid.max_shift != m:
            pset = pset.restrict(ShiftGrid(m))
        if method == "greedy":
            bounds = compute_bounds(pset, gt, eval_config, greedy_config, threads=threads)
        elif method == "brute":
            matches = match_cells(pset, gt, eval_config, threads)
            ext = brute_force_extremes(pset, gt, eval_config, cap=cap, matches=matches)
            baseline = compute_ap({i: Shift(0, 0) for i in pset.image_ids}, pset, gt, eval_config, matches=matches)
            bounds = BoundsResult(
                baseline=baseline,
                ap_best=ext[MAXIMIZE][0],
                ap_worst=ext[MINIMIZE][0],
                assignment_best=ext[MAXIMIZE][1],
                assignment_worst=ext[MINIMIZE][1],
                eval_count=len(pset.grid) ** len(pset.image_ids),
                iterations_run=0,
            )
        else:
            raise ValueError(f"unknown method {method!r}")
        rows.append(SweepRow(m, bounds))
    return rows
