"""Shift test-time augmentation: pool every shift's (de-shifted) boxes, then NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from shiftap.dataset import Detection, ShiftedPredictionSet
from shiftap.geometry import Shift, ShiftGrid, iou


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.5
    class_aware: bool = True

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must be in (0, 1]")


def nms(detections: Iterable[Detection], config: NmsConfig = NmsConfig()) -> list[Detection]:
    """Greedy suppression; survivors come back in (score desc, det_id asc) order.

    A detection is dropped when a kept one (of the same category, if class
    aware) overlaps it with IoU strictly above the threshold.
    """
    kept: list[Detection] = []
    for d in sorted(detections, key=lambda d: (-d.score, d.det_id)):
        for k in kept:
            if config.class_aware and k.category_id != d.category_id:
                continue
            if iou(k.box, d.box) > config.iou_threshold:
                break
        else:
            kept.append(d)
    return kept


def tta_aggregate(pset: ShiftedPredictionSet, config: NmsConfig = NmsConfig()) -> dict[int, list[Detection]]:
    """Per image: pool all shifts' detections and suppress duplicates.

    Pooled detections are renumbered image by image in (shift, original
    det_id) order, so on exact ties the copy from the smallest shift survives.
    """
    out = {}
    next_id = 0
    for i in pset.image_ids:
        pooled = []
        for s in pset.grid:
            for d in sorted(pset.cells[(i, s)], key=lambda d: d.det_id):
                pooled.append(Detection(d.image_id, d.category_id, d.box, d.score, next_id))
                next_id += 1
        out[i] = nms(pooled, config)
    return out


def as_prediction_set(aggregated: dict[int, list[Detection]]) -> ShiftedPredictionSet:
    """Wrap aggregated detections as a single-shift (M=0) prediction set."""
    zero = Shift(0, 0)
    ids = tuple(sorted(aggregated))
    cells = {(i, zero): tuple(sorted(aggregated[i], key=lambda d: d.det_id)) for i in ids}
    return ShiftedPredictionSet(ShiftGrid(0), ids, cells, frozenset(cells))


def to_records(aggregated: dict[int, list[Detection]]) -> list[dict]:
    """COCO detection-results records (no shift field), ordered by det_id."""
    dets = sorted((d for i in sorted(aggregated) for d in aggregated[i]), key=lambda d: d.det_id)
    return [
        {"image_id": d.image_id, "category_id": d.category_id, "bbox": d.box.as_list(), "score": d.score}
        for d in dets
    ]
