"""Ground truth, per-shift predictions and shift manifests.

Everything is normalised into the canonical frame, i.e. the coordinates of
the original, un-shifted image. Predictions made on shifted images are
de-shifted on the way in, so the evaluator never needs to know about shifts.

File formats
------------
Ground truth is the usual COCO subset::

    {"images": [{"id", "width", "height"}],
     "annotations": [{"id", "image_id", "category_id", "bbox", "iscrowd"}],
     "categories": [{"id", "name"}]}

Predictions are COCO detection-results arrays, either one file per shift
named ``shift_<dx>_<dy>.json`` or a single file whose records carry
``"shift": [dx, dy]``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from shiftap.geometry import Box, Shift, ShiftGrid, apply_shift, unapply_shift

log = logging.getLogger(__name__)

SHIFT_FILE_RE = re.compile(r"^shift_(\d+)_(\d+)\.json$")


class DatasetError(ValueError):
    """Malformed or inconsistent input. Carries the offending file and record."""

    def __init__(self, message: str, path: str | os.PathLike | None = None, index: int | None = None):
        self.path = None if path is None else str(path)
        self.index = index
        where = ""
        if self.path is not None:
            where = self.path
            if index is not None:
                where += f" [record {index}]"
            where += ": "
        super().__init__(where + message)


@dataclass(frozen=True, slots=True)
class ImageRecord:
    image_id: int
    width: int
    height: int
    file_name: str | None = None


@dataclass(frozen=True, slots=True)
class Category:
    category_id: int
    name: str


@dataclass(frozen=True, slots=True)
class GroundTruthAnnotation:
    ann_id: int
    image_id: int
    category_id: int
    box: Box
    ignore: bool = False


@dataclass(frozen=True, slots=True)
class Detection:
    image_id: int
    category_id: int
    box: Box
    score: float
    det_id: int


@dataclass
class GroundTruth:
    images: dict[int, ImageRecord]
    annotations: list[GroundTruthAnnotation]
    categories: dict[int, Category]
    by_image: dict[int, list[GroundTruthAnnotation]] = field(init=False, repr=False)

    def __post_init__(self):
        self.by_image = {i: [] for i in self.images}
        for ann in self.annotations:
            self.by_image[ann.image_id].append(ann)

    @property
    def image_ids(self) -> list[int]:
        return sorted(self.images)

    @property
    def category_ids(self) -> list[int]:
        return sorted(self.categories)

    def to_coco(self) -> dict:
        images = []
        for i in self.image_ids:
            rec = self.images[i]
            d = {"id": rec.image_id, "width": rec.width, "height": rec.height}
            if rec.file_name is not None:
                d["file_name"] = rec.file_name
            images.append(d)
        annotations = [
            {
                "id": a.ann_id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "bbox": a.box.as_list(),
                "area": a.box.area,
                "iscrowd": int(a.ignore),
            }
            for a in self.annotations
        ]
        categories = [
            {"id": c.category_id, "name": c.name} for c in sorted(self.categories.values(), key=lambda c: c.category_id)
        ]
        return {"images": images, "annotations": annotations, "categories": categories}


@dataclass
class ShiftedPredictionSet:
    """Detections for every ``(image, shift)`` cell, in the canonical frame.

    ``cells`` is complete over ``image_ids x grid``; cells for which no
    input was seen hold an empty tuple and are absent from ``observed``.
    """

    grid: ShiftGrid
    image_ids: tuple[int, ...]
    cells: dict[tuple[int, Shift], tuple[Detection, ...]]
    observed: frozenset[tuple[int, Shift]] = frozenset()

    def __getitem__(self, key: tuple[int, Shift]) -> tuple[Detection, ...]:
        return self.cells[key]

    def missing_cells(self) -> list[tuple[int, Shift]]:
        return [
            (i, s) for i in self.image_ids for s in self.grid if (i, s) not in self.observed
        ]

    def restrict(self, grid: ShiftGrid) -> "ShiftedPredictionSet":
        """Sub-set over a smaller grid (shifts outside it are dropped)."""
        if grid.max_shift > self.grid.max_shift:
            raise ValueError(f"cannot restrict grid M={self.grid.max_shift} to larger M={grid.max_shift}")
        cells = {(i, s): self.cells[(i, s)] for i in self.image_ids for s in grid}
        observed = frozenset(c for c in self.observed if c[1] in grid)
        return ShiftedPredictionSet(grid, self.image_ids, cells, observed)

    def records(self, shift: Shift, frame: str = "shifted") -> list[dict]:
        """COCO detection-result records of one shift, ordered by det_id."""
        dets = sorted(
            (d for i in self.image_ids for d in self.cells[(i, shift)]), key=lambda d: d.det_id
        )
        out = []
        for d in dets:
            box = apply_shift(d.box, shift) if frame == "shifted" else d.box
            out.append(
                {"image_id": d.image_id, "category_id": d.category_id, "bbox": box.as_list(), "score": d.score}
            )
        return out


def read_json(path: str | os.PathLike):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DatasetError("file not found", path) from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON: {exc}", path) from None


def _parse_bbox(raw, path, index) -> Box:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise DatasetError("bbox must be a list [x, y, w, h]", path, index)
    try:
        vals = [float(v) for v in raw]
    except (TypeError, ValueError):
        raise DatasetError("bbox values must be numbers", path, index) from None
    if not all(math.isfinite(v) for v in vals):
        raise DatasetError("bbox values must be finite", path, index)
    if vals[2] < 0 or vals[3] < 0:
        raise DatasetError("bbox width/height must be non-negative", path, index)
    return Box(*vals)


def parse_ground_truth(data: Mapping, path: str | os.PathLike = "<memory>") -> GroundTruth:
    if not isinstance(data, Mapping):
        raise DatasetError("ground truth must be a JSON object", path)
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key), list):
            raise DatasetError(f"missing or invalid '{key}' list", path)

    categories: dict[int, Category] = {}
    for idx, c in enumerate(data["categories"]):
        try:
            cid = int(c["id"])
        except (KeyError, TypeError, ValueError):
            raise DatasetError("category needs an integer 'id'", path, idx) from None
        if cid in categories:
            raise DatasetError(f"duplicate category id {cid}", path, idx)
        categories[cid] = Category(cid, str(c.get("name", cid)))

    images: dict[int, ImageRecord] = {}
    for idx, im in enumerate(data["images"]):
        try:
            iid, w, h = int(im["id"]), int(im["width"]), int(im["height"])
        except (KeyError, TypeError, ValueError):
            raise DatasetError("image needs integer 'id', 'width', 'height'", path, idx) from None
        if iid in images:
            raise DatasetError(f"duplicate image_id {iid}", path, idx)
        if w <= 0 or h <= 0:
            raise DatasetError(f"image {iid} has non-positive size", path, idx)
        images[iid] = ImageRecord(iid, w, h, im.get("file_name"))

    annotations = []
    seen_ann = set()
    for idx, a in enumerate(data["annotations"]):
        try:
            aid, iid, cid = int(a["id"]), int(a["image_id"]), int(a["category_id"])
        except (KeyError, TypeError, ValueError):
            raise DatasetError("annotation needs integer 'id', 'image_id', 'category_id'", path, idx) from None
        if aid in seen_ann:
            raise DatasetError(f"duplicate annotation id {aid}", path, idx)
        seen_ann.add(aid)
        if cid not in categories:
            raise DatasetError(f"unknown category {cid}", path, idx)
        if iid not in images:
            raise DatasetError(f"unknown image_id {iid}", path, idx)
        box = _parse_bbox(a.get("bbox"), path, idx)
        im = images[iid]
        if box.x < 0 or box.y < 0 or box.x + box.w > im.width or box.y + box.h > im.height:
            log.warning("%s [record %d]: annotation %d extends outside image %d", path, idx, aid, iid)
        annotations.append(GroundTruthAnnotation(aid, iid, cid, box, bool(a.get("iscrowd", 0))))

    return GroundTruth(images, annotations, categories)


def load_ground_truth(path: str | os.PathLike) -> GroundTruth:
    return parse_ground_truth(read_json(path), path)


def _parse_shift(raw, path, index) -> Shift:
    if not isinstance(raw, (list, tuple)) or len(raw) != 2:
        raise DatasetError("shift must be [dx, dy]", path, index)
    try:
        dx, dy = (int(v) for v in raw)
    except (TypeError, ValueError):
        raise DatasetError("shift values must be integers", path, index) from None
    return Shift(dx, dy)


def _prediction_files(source) -> list[tuple[Path, Shift | None]]:
    if isinstance(source, (str, os.PathLike)):
        source = [source]
    files: list[tuple[Path, Shift | None]] = []
    for src in source:
        p = Path(src)
        if p.is_dir():
            found = []
            for child in p.iterdir():
                m = SHIFT_FILE_RE.match(child.name)
                if m:
                    found.append((child, Shift(int(m.group(1)), int(m.group(2)))))
            if not found:
                raise DatasetError("directory holds no shift_<dx>_<dy>.json files", p)
            files.extend(sorted(found, key=lambda f: f[1].key))
        elif p.exists():
            m = SHIFT_FILE_RE.match(p.name)
            files.append((p, Shift(int(m.group(1)), int(m.group(2))) if m else None))
        else:
            raise DatasetError("file not found", p)
    return files


def infer_max_shift(source) -> int:
    """Largest shift component present in a prediction source."""
    best = 0
    for path, shift in _prediction_files(source):
        if shift is not None:
            best = max(best, shift.dx, shift.dy)
            continue
        records = read_json(path)
        if isinstance(records, list):
            for r in records:
                if isinstance(r, Mapping) and isinstance(r.get("shift"), (list, tuple)) and len(r["shift"]) == 2:
                    best = max(best, *(int(v) for v in r["shift"]))
    return best


def load_predictions(
    source,
    grid: ShiftGrid,
    frame: str = "shifted",
    image_ids: Iterable[int] | None = None,
    default_shift: Shift | None = None,
) -> ShiftedPredictionSet:
    """Load detections for every (image, shift) cell.

    ``source`` is a directory of ``shift_<dx>_<dy>.json`` files, a single
    results file, or a list of either. With ``frame="shifted"`` boxes are
    de-shifted into the canonical frame. A per-shift file covers every image
    for its shift; a single file only covers the cells it has records for.
    ``default_shift`` is used for records without any shift information.
    """
    if frame not in ("shifted", "canonical"):
        raise ValueError(f"frame must be 'shifted' or 'canonical', not {frame!r}")
    known = None if image_ids is None else set(image_ids)
    per_cell: dict[tuple[int, Shift], list[Detection]] = {}
    observed: set[tuple[int, Shift]] = set()
    covered_shifts: set[Shift] = set()
    seen_images: set[int] = set()
    det_id = 0

    for path, file_shift in _prediction_files(source):
        records = read_json(path)
        if not isinstance(records, list):
            raise DatasetError("prediction file must hold a JSON array", path)
        if file_shift is not None:
            if file_shift not in grid:
                raise DatasetError(f"shift outside grid: ({file_shift.dx}, {file_shift.dy}) with M={grid.max_shift}", path)
            covered_shifts.add(file_shift)
        for idx, r in enumerate(records):
            if not isinstance(r, Mapping):
                raise DatasetError("record must be an object", path, idx)
            try:
                iid, cid = int(r["image_id"]), int(r["category_id"])
            except (KeyError, TypeError, ValueError):
                raise DatasetError("record needs integer 'image_id' and 'category_id'", path, idx) from None
            if known is not None and iid not in known:
                raise DatasetError(f"unknown image_id {iid}", path, idx)
            try:
                score = float(r["score"])
            except (KeyError, TypeError, ValueError):
                raise DatasetError("record needs a numeric 'score'", path, idx) from None
            if not 0.0 <= score <= 1.0:
                raise DatasetError(f"score outside [0, 1]: {score}", path, idx)
            box = _parse_bbox(r.get("bbox"), path, idx)

            shift = file_shift
            if "shift" in r:
                rec_shift = _parse_shift(r["shift"], path, idx)
                if shift is not None and rec_shift != shift:
                    raise DatasetError("record shift disagrees with file name", path, idx)
                shift = rec_shift
            if shift is None:
                shift = default_shift
            if shift is None:
                raise DatasetError("missing shift information", path, idx)
            if shift not in grid:
                raise DatasetError(f"shift outside grid: ({shift.dx}, {shift.dy}) with M={grid.max_shift}", path, idx)

            if frame == "shifted":
                box = unapply_shift(box, shift)
            per_cell.setdefault((iid, shift), []).append(Detection(iid, cid, box, score, det_id))
            observed.add((iid, shift))
            seen_images.add(iid)
            det_id += 1

    ids = tuple(sorted(known if known is not None else seen_images))
    for s in covered_shifts:
        observed.update((i, s) for i in ids)
    cells = {(i, s): tuple(per_cell.get((i, s), ())) for i in ids for s in grid}
    return ShiftedPredictionSet(grid, ids, cells, frozenset(observed))


def write_predictions(pset: ShiftedPredictionSet, directory: str | os.PathLike, frame: str = "shifted") -> list[Path]:
    """Write one ``shift_<dx>_<dy>.json`` file per grid shift."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in pset.grid:
        p = out / f"shift_{s.dx}_{s.dy}.json"
        write_json(p, pset.records(s, frame=frame))
        written.append(p)
    return written


def write_json(path: str | os.PathLike, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


# -- shift manifest --------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image_id: int
    shifted_name: str
    shift: Shift
    size: tuple[int, int]
    canvas: tuple[int, int]

    @property
    def offset(self) -> tuple[int, int]:
        # The original image's top-left corner lands at the shift offset.
        return (self.shift.dx, self.shift.dy)


@dataclass(frozen=True)
class ShiftManifest:
    max_shift: int
    canvas_policy: str
    entries: tuple[ManifestEntry, ...]

    def to_json(self) -> dict:
        return {
            "max_shift": self.max_shift,
            "canvas_policy": self.canvas_policy,
            "entries": [
                {
                    "image_id": e.image_id,
                    "shifted_name": e.shifted_name,
                    "shift": e.shift.as_list(),
                    "offset": list(e.offset),
                    "size": list(e.size),
                    "canvas": list(e.canvas),
                }
                for e in self.entries
            ],
        }


def _shifted_name(rec: ImageRecord, s: Shift) -> str:
    if rec.file_name:
        stem, ext = os.path.splitext(os.path.basename(rec.file_name))
    else:
        stem, ext = str(rec.image_id), ".png"
    return f"{stem}_shift_{s.dx}_{s.dy}{ext or '.png'}"


def emit_shift_manifest(
    images: Sequence[ImageRecord] | Mapping[int, ImageRecord],
    grid: ShiftGrid,
    padding_policy: str = "minimal",
) -> ShiftManifest:
    """Describe how each image is pasted into a black canvas at every shift.

    ``minimal`` gives each image a ``(width + M, height + M)`` canvas;
    ``global`` uses one canvas, sized for the largest image, for all of them.
    """
    if isinstance(images, Mapping):
        images = [images[k] for k in sorted(images)]
    if not images:
        raise ValueError("image table is empty")
    if padding_policy not in ("minimal", "global"):
        raise ValueError(f"unknown padding policy {padding_policy!r}")
    m = grid.max_shift
    if padding_policy == "global":
        gw = max(im.width for im in images) + m
        gh = max(im.height for im in images) + m
    entries = []
    for im in sorted(images, key=lambda r: r.image_id):
        canvas = (gw, gh) if padding_policy == "global" else (im.width + m, im.height + m)
        for s in grid:
            entries.append(ManifestEntry(im.image_id, _shifted_name(im, s), s, (im.width, im.height), canvas))
    return ShiftManifest(m, padding_policy, tuple(entries))
