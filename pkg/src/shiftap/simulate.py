"""Synthetic detector with controllable shift sensitivity.

Stands in for a real detector run on shifted images. Every random draw comes
from a generator keyed by ``(seed, purpose, image_id, dx, dy)``, so a cell's
content does not depend on which other cells were generated or in what
order, and generation can be spread across threads.

Box coordinates are quantised to 1/16 px. Adding or removing an integer
shift is then exact in floating point, which keeps the shifted-file round
trip lossless.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from shiftap.dataset import (
    Category,
    Detection,
    GroundTruth,
    GroundTruthAnnotation,
    ImageRecord,
    ShiftedPredictionSet,
    ShiftManifest,
    emit_shift_manifest,
    write_json,
    write_predictions,
)
from shiftap.geometry import Box, Shift, ShiftGrid, iou

QUANTUM = 16.0
MIN_SIZE_FRAC, MAX_SIZE_FRAC = 0.08, 0.3
FP_MAX_IOU = 0.3
OBJECT_MAX_IOU = 0.3
FP_ATTEMPTS = 50

_GT, _CELL, _FP = 0, 1, 2
DROP_MODES = ("constant", "parity", "linear")


def _q(v: float) -> float:
    return math.floor(v * QUANTUM + 0.5) / QUANTUM


@dataclass(frozen=True)
class SimConfig:
    """Simulator parameters.

    Per cell, each object is dropped with ``drop_prob(shift)``; survivors get
    Gaussian corner jitter (``box_jitter_sigma`` px) and a score of
    ``score_base * IoU(jittered, true) + score_jitter_sigma * N(0, 1)``,
    clipped to [0, 1], so better-placed boxes score higher. On top come
    Poisson(``fp_rate``) background boxes with IoU < 0.3 against every object
    and scores uniform in [0, ``fp_score_max``].

    ``drop_mode`` selects ``drop_prob``: ``constant`` (p everywhere),
    ``parity`` (p on shifts with odd dx + dy, else 0) or ``linear``
    (p * (dx + dy) / 2M).
    """

    n_images: int = 100
    image_size: int = 128
    n_categories: int = 3
    objects_min: int = 1
    objects_max: int = 8
    max_shift: int = 1
    score_base: float = 0.9
    box_jitter_sigma: float = 0.0
    score_jitter_sigma: float = 0.0
    drop_mode: str = "constant"
    drop_p: float = 0.0
    fp_rate: float = 0.0
    fp_score_max: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1 or self.image_size < 8 or self.n_categories < 1:
            raise ValueError("n_images >= 1, image_size >= 8 and n_categories >= 1 required")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError("need 0 <= objects_min <= objects_max")
        if self.max_shift < 0:
            raise ValueError("max_shift must be >= 0")
        for name in ("score_base", "drop_p", "fp_score_max"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.box_jitter_sigma < 0 or self.score_jitter_sigma < 0 or self.fp_rate < 0:
            raise ValueError("sigmas and fp_rate must be non-negative")
        if self.drop_mode not in DROP_MODES:
            raise ValueError(f"drop_mode must be one of {DROP_MODES}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_json(cls, data: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SimConfig fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def grid(self) -> ShiftGrid:
        return ShiftGrid(self.max_shift)

    def drop_prob(self, s: Shift) -> float:
        if self.drop_mode == "constant":
            return self.drop_p
        if self.drop_mode == "parity":
            return self.drop_p if (s.dx + s.dy) % 2 else 0.0
        if self.max_shift == 0:
            return 0.0
        return self.drop_p * (s.dx + s.dy) / (2 * self.max_shift)


def _rng(cfg: SimConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=key))


def _random_box(rng: np.random.Generator, size: int) -> Box:
    w, h = rng.uniform(MIN_SIZE_FRAC * size, MAX_SIZE_FRAC * size, 2)
    w, h = max(_q(w), 1.0), max(_q(h), 1.0)
    x = _q(rng.uniform(0, size - w))
    y = _q(rng.uniform(0, size - h))
    return Box(x, y, w, h)


def _ground_truth(cfg: SimConfig, image_id: int) -> list[tuple[int, Box]]:
    rng = _rng(cfg, _GT, image_id)
    n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    cats = rng.integers(1, cfg.n_categories + 1, n)
    # Real detector output has been through NMS, so heavily overlapping
    # objects are kept apart. After FP_ATTEMPTS the last draw is accepted,
    # which keeps the object count exact.
    boxes: list[Box] = []
    for _ in range(n):
        for _ in range(FP_ATTEMPTS):
            box = _random_box(rng, cfg.image_size)
            if all(iou(box, b) < OBJECT_MAX_IOU for b in boxes):
                break
        boxes.append(box)
    return [(int(c), b) for c, b in zip(cats, boxes)]


def _cell(cfg: SimConfig, image_id: int, s: Shift, objects: list[tuple[int, Box]]) -> list[tuple[int, Box, float]]:
    """(category, canonical box, score) triples for one image at one shift."""
    n = len(objects)
    rng = _rng(cfg, _CELL, image_id, s.dx, s.dy)
    # Fixed draw shapes: object j always consumes element j.
    u_drop = rng.random(n)
    corner_noise = rng.standard_normal((n, 4))
    score_noise = rng.standard_normal(n)
    p = cfg.drop_prob(s)
    out = []
    for j, (c, b) in enumerate(objects):
        if u_drop[j] < p:
            continue
        if cfg.box_jitter_sigma > 0:
            e = corner_noise[j] * cfg.box_jitter_sigma
            x1, y1 = _q(b.x + e[0]), _q(b.y + e[1])
            x2 = max(_q(b.x + b.w + e[2]), x1 + 1 / QUANTUM)
            y2 = max(_q(b.y + b.h + e[3]), y1 + 1 / QUANTUM)
            box = Box(x1, y1, x2 - x1, y2 - y1)
            quality = iou(box, b)
        else:
            box, quality = b, 1.0
        score = cfg.score_base * quality + cfg.score_jitter_sigma * score_noise[j]
        out.append((c, box, min(max(float(score), 0.0), 1.0)))

    if cfg.fp_rate > 0:
        frng = _rng(cfg, _FP, image_id, s.dx, s.dy)
        for _ in range(int(frng.poisson(cfg.fp_rate))):
            c = int(frng.integers(1, cfg.n_categories + 1))
            score = float(frng.uniform(0.0, cfg.fp_score_max))
            for _ in range(FP_ATTEMPTS):
                box = _random_box(frng, cfg.image_size)
                if all(iou(box, b) < FP_MAX_IOU for _, b in objects):
                    out.append((c, box, score))
                    break
    return out


def generate_dataset(cfg: SimConfig, threads: int = 1) -> tuple[GroundTruth, ShiftedPredictionSet, ShiftManifest]:
    image_ids = list(range(1, cfg.n_images + 1))
    images = {i: ImageRecord(i, cfg.image_size, cfg.image_size, f"{i:06d}.png") for i in image_ids}
    categories = {c: Category(c, f"class_{c}") for c in range(1, cfg.n_categories + 1)}
    objects = {i: _ground_truth(cfg, i) for i in image_ids}
    annotations = []
    for i in image_ids:
        for c, b in objects[i]:
            annotations.append(GroundTruthAnnotation(len(annotations) + 1, i, c, b, False))
    gt = GroundTruth(images, annotations, categories)

    grid = cfg.grid
    keys = [(i, s) for s in grid for i in image_ids]  # file order: shift, then image
    work = lambda key: _cell(cfg, key[0], key[1], objects[key[0]])
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(work, keys, chunksize=32))
    else:
        raw = [work(k) for k in keys]

    cells = {}
    det_id = 0
    for (i, s), triples in zip(keys, raw):
        dets = []
        for c, b, score in triples:
            dets.append(Detection(i, c, b, score, det_id))
            det_id += 1
        cells[(i, s)] = tuple(dets)
    pset = ShiftedPredictionSet(grid, tuple(image_ids), cells, frozenset(cells))
    return gt, pset, emit_shift_manifest(images, grid)


def describe(cfg: SimConfig) -> dict:
    """Expected detection counts (mean and standard deviation) per shift and in total."""
    a, b = cfg.objects_min, cfg.objects_max
    mean_obj = (a + b) / 2
    var_obj = ((b - a + 1) ** 2 - 1) / 12
    n = cfg.n_images
    per_shift = []
    tot_mean = tot_var = q_sum = 0.0
    for s in cfg.grid:
        q = 1.0 - cfg.drop_prob(s)
        tp_mean = n * mean_obj * q
        tp_var = n * (mean_obj * q * (1 - q) + var_obj * q * q)
        fp_mean = n * cfg.fp_rate
        per_shift.append(
            {
                "shift": s.as_list(),
                "drop_prob": cfg.drop_prob(s),
                "expected_true_detections": tp_mean,
                "std_true_detections": math.sqrt(tp_var),
                "expected_spurious_detections": fp_mean,
                "std_spurious_detections": math.sqrt(fp_mean),
            }
        )
        tot_mean += tp_mean + fp_mean
        # Binomial and spurious parts are independent across shifts; the
        # object count is shared, so its contribution is added once below.
        tot_var += n * mean_obj * q * (1 - q) + fp_mean
        q_sum += q
    tot_var += n * var_obj * q_sum * q_sum
    return {
        "n_images": n,
        "n_shifts": len(cfg.grid),
        "expected_objects": n * mean_obj,
        "std_objects": math.sqrt(n * var_obj),
        "per_shift": per_shift,
        "expected_detections": tot_mean,
        "std_detections": math.sqrt(tot_var),
    }


def write_dataset(
    out_dir: str | Path,
    cfg: SimConfig,
    gt: GroundTruth,
    pset: ShiftedPredictionSet,
    manifest: ShiftManifest,
) -> dict[str, Path]:
    """Write files exactly as an external detector harness would."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "config": out / "config.json",
        "ground_truth": out / "gt.json",
        "predictions": out / "predictions",
        "manifest": out / "manifest.json",
        "summary": out / "summary.json",
    }
    write_json(paths["config"], cfg.to_json())
    write_json(paths["ground_truth"], gt.to_coco())
    write_predictions(pset, paths["predictions"], frame="shifted")
    write_json(paths["manifest"], manifest.to_json())
    write_json(paths["summary"], describe(cfg))
    return paths
