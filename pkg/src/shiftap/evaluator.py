"""COCO-protocol average precision over one shift per image.

Two evaluation routes share the per-cell matching and the final
precision/recall integration:

* :func:`compute_ap` concatenates the selected cells and sorts from scratch.
* :class:`EvalCache` keeps one merged, sorted stream per (category, IoU
  threshold) and answers "what if image i used shift s instead" by deleting
  one image's entries and inserting another's. Matching never reruns.

Both routes feed identical integer TP sequences into :func:`curve_ap`, so
their results are bit-identical, not merely close.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from shiftap.dataset import Detection, GroundTruth, GroundTruthAnnotation, ShiftedPredictionSet
from shiftap.geometry import Shift, ShiftGrid, crowd_iou, iou

COCO_IOU_THRESHOLDS = tuple(np.linspace(0.5, 0.95, 10).tolist())


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = COCO_IOU_THRESHOLDS
    recall_points: int = 101
    max_dets_per_image: int = 100
    area_range: tuple[float, float] = (0.0, math.inf)

    def __post_init__(self):
        ts = tuple(float(t) for t in self.iou_thresholds)
        object.__setattr__(self, "iou_thresholds", ts)
        if not ts or any(not 0 < t <= 1 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("iou_thresholds must be strictly increasing within (0, 1]")
        if self.recall_points < 2:
            raise ValueError("recall_points must be >= 2")
        if self.max_dets_per_image < 1:
            raise ValueError("max_dets_per_image must be >= 1")
        if self.ap50_index is None:
            raise ValueError("iou_thresholds must contain 0.5")

    @property
    def ap50_index(self) -> int | None:
        for k, t in enumerate(self.iou_thresholds):
            if abs(t - 0.5) < 1e-12:
                return k
        return None

    @property
    def recall_thresholds(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.recall_points)

    def to_json(self) -> dict:
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "recall_points": self.recall_points,
            "max_dets_per_image": self.max_dets_per_image,
            "area_range": [self.area_range[0], None if math.isinf(self.area_range[1]) else self.area_range[1]],
        }


# -- per-image matching -----------------------------------------------------


@dataclass(frozen=True)
class CategoryMatch:
    """Matching outcome of one image/category, detections in score order.

    Array shapes: ``scores``/``det_ids`` are ``(k,)``; ``tp``, ``ignored`` and
    ``matched`` (annotation id or -1) are ``(T, k)`` over IoU thresholds.
    """

    scores: np.ndarray
    det_ids: np.ndarray
    tp: np.ndarray
    ignored: np.ndarray
    matched: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class ImageMatchResult:
    image_id: int
    n_gt: dict[int, int]
    categories: dict[int, CategoryMatch]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _gt_area_ignored(ann: GroundTruthAnnotation, lo: float, hi: float) -> bool:
    a = ann.box.area
    return ann.ignore or a < lo or a > hi


def match_image(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthAnnotation],
    config: EvalConfig,
) -> ImageMatchResult:
    """Greedy COCO matching of one image's detections, per category and threshold.

    Detections are visited by (score desc, det_id asc) after truncation to
    ``max_dets_per_image`` per category. Each takes the best-overlapping
    still-free ground truth at or above the threshold; real objects are
    preferred over ignore regions, and a detection landing on an ignore
    region is itself ignored. Crowd regions may absorb any number of
    detections and are scored with detection-normalised overlap.
    """
    image_ids = {d.image_id for d in detections} | {g.image_id for g in ground_truths}
    if len(image_ids) > 1:
        raise EvaluationError(f"match_image got several images: {sorted(image_ids)}")
    image_id = image_ids.pop() if image_ids else -1
    lo, hi = config.area_range
    thresholds = config.iou_thresholds
    n_t = len(thresholds)

    gts_by_cat: dict[int, list[GroundTruthAnnotation]] = {}
    for g in ground_truths:
        gts_by_cat.setdefault(g.category_id, []).append(g)
    dets_by_cat: dict[int, list[Detection]] = {}
    for d in detections:
        dets_by_cat.setdefault(d.category_id, []).append(d)

    n_gt = {}
    for c, gs in gts_by_cat.items():
        n_gt[c] = sum(1 for g in gs if not _gt_area_ignored(g, lo, hi))

    out = {}
    for c, ds in dets_by_cat.items():
        ds = sorted(ds, key=lambda d: (-d.score, d.det_id))[: config.max_dets_per_image]
        gs = gts_by_cat.get(c, [])
        g_ign = [_gt_area_ignored(g, lo, hi) for g in gs]
        order = sorted(range(len(gs)), key=lambda j: g_ign[j])  # stable: real objects first
        gs = [gs[j] for j in order]
        g_ign = [g_ign[j] for j in order]
        crowd = [g.ignore for g in gs]
        ious = [
            [crowd_iou(d.box, g.box) if g.ignore else iou(d.box, g.box) for g in gs]
            for d in ds
        ]
        k = len(ds)
        tp = np.zeros((n_t, k), dtype=bool)
        ignored = np.zeros((n_t, k), dtype=bool)
        matched = np.full((n_t, k), -1, dtype=np.int64)
        d_out_of_range = [not (lo <= d.box.area <= hi) for d in ds]
        n_g = len(gs)
        for ti, t in enumerate(thresholds):
            taken = [False] * n_g
            for di in range(k):
                best = min(t, 1 - 1e-10)
                m = -1
                row = ious[di]
                for gi in range(n_g):
                    if taken[gi] and not crowd[gi]:
                        continue
                    if m > -1 and not g_ign[m] and g_ign[gi]:
                        break
                    if row[gi] < best:
                        continue
                    best = row[gi]
                    m = gi
                if m == -1:
                    ignored[ti, di] = d_out_of_range[di]
                    continue
                taken[m] = True
                matched[ti, di] = gs[m].ann_id
                if g_ign[m]:
                    ignored[ti, di] = True
                else:
                    tp[ti, di] = True
        out[c] = CategoryMatch(
            scores=_frozen(np.array([d.score for d in ds], dtype=np.float64)),
            det_ids=_frozen(np.array([d.det_id for d in ds], dtype=np.int64)),
            tp=_frozen(tp),
            ignored=_frozen(ignored),
            matched=_frozen(matched),
        )
    return ImageMatchResult(image_id, n_gt, out)


def match_cells(
    pset: ShiftedPredictionSet,
    gt: GroundTruth,
    config: EvalConfig,
    threads: int = 1,
) -> dict[tuple[int, Shift], ImageMatchResult]:
    """Match every (image, shift) cell. Output is independent of ``threads``."""
    keys = [(i, s) for i in pset.image_ids for s in pset.grid]

    def work(key):
        return match_image(pset.cells[key], gt.by_image.get(key[0], []), config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, keys, chunksize=64))
    else:
        results = [work(k) for k in keys]
    return dict(zip(keys, results))


# -- AP integration ---------------------------------------------------------


def curve_ap(tp: np.ndarray, n_gt: int, recall_thresholds: np.ndarray) -> float:
    """Interpolated AP of a ranked TP/FP sequence (ignored entries removed).

    Precision is made monotone with a right-to-left running maximum and read
    off at each recall threshold; thresholds beyond the achieved recall
    contribute zero.
    """
    n = len(tp)
    if n == 0:
        return 0.0
    tpc = np.cumsum(tp, dtype=np.int64)
    recall = tpc / n_gt
    precision = tpc / np.arange(1, n + 1, dtype=np.int64)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, recall_thresholds, side="left")
    hit = idx < n
    q = np.zeros(len(recall_thresholds))
    q[hit] = precision[idx[hit]]
    return float(q.mean())


def _mean_valid(values: np.ndarray, valid: np.ndarray) -> float:
    if not valid.any():
        return -1.0
    return float(np.mean(values[..., valid]))


@dataclass(frozen=True)
class ApResult:
    """AP table over (IoU threshold, category); -1 marks categories without GT."""

    iou_thresholds: tuple[float, ...]
    category_ids: tuple[int, ...]
    table: tuple[tuple[float, ...], ...]
    ap: float
    ap50: float

    @classmethod
    def from_table(cls, config: EvalConfig, category_ids: Sequence[int], table: np.ndarray, valid: np.ndarray) -> "ApResult":
        table = np.where(valid[None, :], table, -1.0)
        return cls(
            iou_thresholds=config.iou_thresholds,
            category_ids=tuple(int(c) for c in category_ids),
            table=tuple(tuple(float(v) for v in row) for row in table),
            ap=_mean_valid(table, valid),
            ap50=_mean_valid(table[config.ap50_index], valid),
        )

    @property
    def _ap50_index(self) -> int:
        return min(range(len(self.iou_thresholds)), key=lambda k: abs(self.iou_thresholds[k] - 0.5))

    def per_category(self) -> list[dict]:
        t50 = self._ap50_index
        out = []
        for k, c in enumerate(self.category_ids):
            col = [row[k] for row in self.table]
            if col[0] < 0:
                out.append({"category_id": c, "ap": -1.0, "ap50": -1.0})
            else:
                out.append({"category_id": c, "ap": float(np.mean(col)), "ap50": col[t50]})
        return out

    def per_threshold(self) -> list[dict]:
        out = []
        for t, row in zip(self.iou_thresholds, self.table):
            vals = [v for v in row if v >= 0]
            out.append({"iou_threshold": t, "ap": float(np.mean(vals)) if vals else -1.0})
        return out

    def to_json(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "per_category": self.per_category(),
            "per_threshold": self.per_threshold(),
        }


def _gt_counts(gt: GroundTruth, config: EvalConfig, category_ids: Sequence[int]) -> np.ndarray:
    lo, hi = config.area_range
    counts = dict.fromkeys(category_ids, 0)
    for a in gt.annotations:
        if a.category_id in counts and not _gt_area_ignored(a, lo, hi):
            counts[a.category_id] += 1
    return np.array([counts[c] for c in category_ids], dtype=np.int64)


def _check_selection(selection: Mapping[int, Shift], image_ids: Iterable[int], grid: ShiftGrid) -> None:
    for i in image_ids:
        if i not in selection:
            raise EvaluationError(f"incomplete selection: no shift for image {i}")
        if selection[i] not in grid:
            s = selection[i]
            raise EvaluationError(f"shift outside grid: ({s.dx}, {s.dy}) for image {i} with M={grid.max_shift}")


def compute_ap(
    selection: Mapping[int, Shift],
    pset: ShiftedPredictionSet,
    gt: GroundTruth,
    config: EvalConfig = EvalConfig(),
    matches: Mapping[tuple[int, Shift], ImageMatchResult] | None = None,
    thresholds: Sequence[int] | None = None,
) -> ApResult:
    """AP of the dataset formed by taking cell ``(i, selection[i])`` for every image.

    This is the from-scratch route. ``matches`` may hold precomputed cell
    matches; ``thresholds`` restricts work to some threshold indices (the
    others are reported as 0).
    """
    _check_selection(selection, pset.image_ids, pset.grid)
    cats = gt.category_ids
    n_gt = _gt_counts(gt, config, cats)
    valid = n_gt > 0
    t_idx = range(len(config.iou_thresholds)) if thresholds is None else thresholds
    rec = config.recall_thresholds

    chosen = []
    for i in pset.image_ids:
        key = (i, selection[i])
        m = matches[key] if matches is not None else match_image(pset.cells[key], gt.by_image.get(i, []), config)
        chosen.append((i, m))

    table = np.zeros((len(config.iou_thresholds), len(cats)))
    for ci, c in enumerate(cats):
        if not valid[ci]:
            continue
        parts = [(i, m.categories[c]) for i, m in chosen if c in m.categories and len(m.categories[c])]
        if not parts:
            continue
        scores = np.concatenate([p.scores for _, p in parts])
        det_ids = np.concatenate([p.det_ids for _, p in parts])
        img = np.concatenate([np.full(len(p), i, dtype=np.int64) for i, p in parts])
        tp = np.concatenate([p.tp for _, p in parts], axis=1)
        ign = np.concatenate([p.ignored for _, p in parts], axis=1)
        order = np.lexsort((det_ids, img, -scores))
        for ti in t_idx:
            keep = ~ign[ti, order]
            table[ti, ci] = curve_ap(tp[ti, order][keep], int(n_gt[ci]), rec)
    return ApResult.from_table(config, cats, table, valid)


# -- incremental cache ------------------------------------------------------


@dataclass
class _Stream:
    ranks: np.ndarray
    tp: np.ndarray


@dataclass
class EvalCache:
    """Incremental AP evaluator over per-image shift swaps.

    Holds immutable per-cell match results (ranked globally once) plus the
    merged stream of the current assignment. :meth:`swap_and_eval` is a pure
    query; :meth:`commit_swap` moves the current assignment. Streams of
    thresholds that were not kept up to date by a restricted commit are
    rebuilt lazily from the assignment.
    """

    pset: ShiftedPredictionSet
    gt: GroundTruth
    config: EvalConfig = field(default_factory=EvalConfig)
    threads: int = 1
    assignment: dict[int, Shift] | None = None
    matches: Mapping[tuple[int, Shift], ImageMatchResult] | None = None
    eval_count: int = field(default=0, init=False)

    def __post_init__(self):
        if self.matches is None:
            self.matches = match_cells(self.pset, self.gt, self.config, self.threads)
        self.category_ids = self.gt.category_ids
        self._cat_index = {c: k for k, c in enumerate(self.category_ids)}
        self.n_gt = _gt_counts(self.gt, self.config, self.category_ids)
        self.valid = self.n_gt > 0
        self._rec = self.config.recall_thresholds
        self._n_t = len(self.config.iou_thresholds)
        self._rank_cells()
        if self.assignment is None:
            self.assignment = {i: Shift(0, 0) for i in self.pset.image_ids}
        else:
            self.assignment = dict(self.assignment)
        _check_selection(self.assignment, self.pset.image_ids, self.pset.grid)
        self._streams: dict[tuple[int, int], _Stream] = {}
        self._table = np.zeros((self._n_t, len(self.category_ids)))
        self._stale = set(range(self._n_t))

    def _rank_cells(self) -> None:
        # One global total order (score desc, image asc, det_id asc) over every
        # detection in every cell; merging streams then reduces to integer merges.
        entries = []
        for (i, s), m in self.matches.items():
            for c, cm in m.categories.items():
                if c in self._cat_index and len(cm):
                    entries.append(((i, s), c, cm))
        if entries:
            scores = np.concatenate([cm.scores for _, _, cm in entries])
            det_ids = np.concatenate([cm.det_ids for _, _, cm in entries])
            img = np.concatenate([np.full(len(cm), key[0], dtype=np.int64) for key, _, cm in entries])
            order = np.lexsort((det_ids, img, -scores))
            rank = np.empty(len(order), dtype=np.int64)
            rank[order] = np.arange(len(order), dtype=np.int64)
        # cell -> category -> threshold -> (ranks, tp) of non-ignored detections
        self._cell: dict[tuple[int, Shift], dict[int, list[tuple[np.ndarray, np.ndarray]]]] = {
            key: {} for key in self.matches
        }
        offset = 0
        for key, c, cm in entries:
            r = rank[offset: offset + len(cm)]
            offset += len(cm)
            per_t = []
            for ti in range(self._n_t):
                keep = ~cm.ignored[ti]
                per_t.append((r[keep], cm.tp[ti][keep]))
            self._cell[key][self._cat_index[c]] = per_t

    # -- stream maintenance

    def _rebuild(self, ti: int) -> None:
        for ci in range(len(self.category_ids)):
            parts = [self._cell[(i, s)][ci][ti] for i, s in self.assignment.items() if ci in self._cell[(i, s)]]
            if parts:
                ranks = np.concatenate([p[0] for p in parts])
                tp = np.concatenate([p[1] for p in parts])
                order = np.argsort(ranks, kind="stable")
                stream = _Stream(ranks[order], tp[order])
            else:
                stream = _Stream(np.empty(0, dtype=np.int64), np.empty(0, dtype=bool))
            self._streams[(ci, ti)] = stream
            self._table[ti, ci] = curve_ap(stream.tp, int(self.n_gt[ci]), self._rec) if self.valid[ci] else 0.0
        self._stale.discard(ti)

    def _fresh(self, thresholds: Iterable[int]) -> None:
        for ti in thresholds:
            if ti in self._stale:
                self._rebuild(ti)

    def _check(self, image_id: int, shift: Shift) -> None:
        if image_id not in self.assignment:
            raise EvaluationError(f"unknown image_id {image_id}")
        if shift not in self.pset.grid:
            raise EvaluationError(
                f"shift outside grid: ({shift.dx}, {shift.dy}) with M={self.pset.grid.max_shift}"
            )

    def _rest(self, image_id: int, ci: int, ti: int) -> _Stream:
        stream = self._streams[(ci, ti)]
        old = self._cell[(image_id, self.assignment[image_id])].get(ci)
        if old is None or len(old[ti][0]) == 0:
            return stream
        pos = np.searchsorted(stream.ranks, old[ti][0])
        return _Stream(np.delete(stream.ranks, pos), np.delete(stream.tp, pos))

    @staticmethod
    def _merge(rest: _Stream, new: tuple[np.ndarray, np.ndarray] | None) -> _Stream:
        if new is None or len(new[0]) == 0:
            return rest
        pos = np.searchsorted(rest.ranks, new[0])
        return _Stream(np.insert(rest.ranks, pos, new[0]), np.insert(rest.tp, pos, new[1]))

    def _touched(self, image_id: int, shifts: Iterable[Shift]) -> list[int]:
        cats = set(self._cell[(image_id, self.assignment[image_id])])
        for s in shifts:
            cats.update(self._cell[(image_id, s)])
        return sorted(ci for ci in cats if self.valid[ci])

    def _candidate_tables(self, image_id: int, shifts: Sequence[Shift], thresholds: Sequence[int]) -> list[np.ndarray]:
        self._fresh(thresholds)
        current = self.assignment[image_id]
        tables = [self._table.copy() for _ in shifts]
        for ci in self._touched(image_id, shifts):
            for ti in thresholds:
                rest = None
                for k, s in enumerate(shifts):
                    if s == current:
                        continue
                    if rest is None:
                        rest = self._rest(image_id, ci, ti)
                    cell = self._cell[(image_id, s)].get(ci)
                    merged = self._merge(rest, None if cell is None else cell[ti])
                    tables[k][ti, ci] = curve_ap(merged.tp, int(self.n_gt[ci]), self._rec)
        return tables

    # -- public API

    def current_result(self) -> ApResult:
        self._fresh(range(self._n_t))
        return ApResult.from_table(self.config, self.category_ids, self._table, self.valid)

    def swap_and_eval(self, image_id: int, new_shift: Shift) -> ApResult:
        """AP with ``image_id`` moved to ``new_shift``; the cache is not changed."""
        self._check(image_id, new_shift)
        self.eval_count += 1
        table = self._candidate_tables(image_id, [new_shift], range(self._n_t))[0]
        return ApResult.from_table(self.config, self.category_ids, table, self.valid)

    def candidate_objectives(self, image_id: int, shifts: Sequence[Shift], objective: str = "ap50") -> list[float]:
        """Objective value for each candidate shift of one image, others fixed.

        Equal, bit for bit, to ``swap_and_eval(image_id, s).<objective>``;
        the ``ap50`` objective only touches the 0.5 threshold streams.
        """
        for s in shifts:
            self._check(image_id, s)
        self.eval_count += len(shifts)
        if objective == "ap50":
            t50 = self.config.ap50_index
            tables = self._candidate_tables(image_id, shifts, [t50])
            return [_mean_valid(t[t50], self.valid) for t in tables]
        if objective == "ap":
            tables = self._candidate_tables(image_id, shifts, range(self._n_t))
            return [ApResult.from_table(self.config, self.category_ids, t, self.valid).ap for t in tables]
        raise ValueError(f"unknown objective {objective!r}")

    def commit_swap(self, image_id: int, new_shift: Shift, thresholds: Iterable[int] | None = None) -> None:
        """Move ``image_id`` to ``new_shift``.

        ``thresholds`` limits which streams are updated in place; the rest are
        marked stale and rebuilt on demand.
        """
        self._check(image_id, new_shift)
        current = self.assignment[image_id]
        if new_shift == current:
            return
        live = [ti for ti in (range(self._n_t) if thresholds is None else thresholds) if ti not in self._stale]
        cats = self._touched(image_id, [new_shift])
        for ti in live:
            for ci in cats:
                rest = self._rest(image_id, ci, ti)
                cell = self._cell[(image_id, new_shift)].get(ci)
                merged = self._merge(rest, None if cell is None else cell[ti])
                self._streams[(ci, ti)] = merged
                self._table[ti, ci] = curve_ap(merged.tp, int(self.n_gt[ci]), self._rec)
        # Categories without ground truth never enter the AP table, but their
        # streams must still follow the assignment.
        for ti in live:
            for ci in set(self._cell[(image_id, current)]) | set(self._cell[(image_id, new_shift)]):
                if self.valid[ci]:
                    continue
                rest = self._rest(image_id, ci, ti)
                cell = self._cell[(image_id, new_shift)].get(ci)
                self._streams[(ci, ti)] = self._merge(rest, None if cell is None else cell[ti])
        self._stale.update(ti for ti in range(self._n_t) if ti not in live)
        self.assignment[image_id] = new_shift
