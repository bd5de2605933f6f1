import json

import pytest

from shiftap.dataset import (
    DatasetError,
    emit_shift_manifest,
    infer_max_shift,
    load_ground_truth,
    load_predictions,
    write_predictions,
)
from shiftap.geometry import Box, Shift, ShiftGrid
from shiftap.simulate import SimConfig, generate_dataset


def write(path, payload):
    path.write_text(json.dumps(payload))
    return path


GT = {
    "images": [{"id": 1, "width": 20, "height": 20}],
    "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [5, 5, 2, 2], "iscrowd": 0}],
    "categories": [{"id": 1, "name": "a"}],
}


def test_minimal_ground_truth(tmp_path):
    gt = load_ground_truth(write(tmp_path / "gt.json", GT))
    assert (len(gt.images), len(gt.annotations), len(gt.categories)) == (1, 1, 1)
    assert gt.annotations[0].box == Box(5, 5, 2, 2)
    assert not gt.annotations[0].ignore


def test_unknown_category(tmp_path):
    bad = json.loads(json.dumps(GT))
    bad["annotations"][0]["category_id"] = 9
    with pytest.raises(DatasetError, match="unknown category"):
        load_ground_truth(write(tmp_path / "gt.json", bad))


def test_duplicate_image(tmp_path):
    bad = json.loads(json.dumps(GT))
    bad["images"].append({"id": 1, "width": 3, "height": 3})
    with pytest.raises(DatasetError, match="duplicate image_id"):
        load_ground_truth(write(tmp_path / "gt.json", bad))


def test_iscrowd_maps_to_ignore():
    gt = load_ground_truth("tests/fixtures/conformance_gt.json")
    raw = json.load(open("tests/fixtures/conformance_gt.json"))
    crowd_ids = {a["id"] for a in raw["annotations"] if a["iscrowd"]}
    assert crowd_ids
    assert {a.ann_id for a in gt.annotations if a.ignore} == crowd_ids


def test_parse_error_names_file(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(DatasetError, match="broken.json"):
        load_ground_truth(p)


def test_out_of_bounds_annotation_warns(tmp_path, caplog):
    bad = json.loads(json.dumps(GT))
    bad["annotations"][0]["bbox"] = [15, 15, 10, 10]
    gt = load_ground_truth(write(tmp_path / "gt.json", bad))
    assert len(gt.annotations) == 1
    assert "outside image" in caplog.text


def det(x=6, y=5, score=0.9, **extra):
    return {"image_id": 1, "category_id": 1, "bbox": [x, y, 2, 2], "score": score, **extra}


def test_directory_of_shift_files(tmp_path):
    for dx, dy in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        write(tmp_path / f"shift_{dx}_{dy}.json", [det(5 + dx, 5 + dy)])
    pset = load_predictions(tmp_path, ShiftGrid(1), image_ids=[1])
    assert len(pset.cells) == 4
    assert not pset.missing_cells()
    for s in ShiftGrid(1):
        assert pset.cells[(1, s)][0].box == Box(5, 5, 2, 2)


def test_shift_outside_grid(tmp_path):
    p = write(tmp_path / "preds.json", [det(shift=[2, 0])])
    with pytest.raises(DatasetError, match="shift outside grid"):
        load_predictions(p, ShiftGrid(1))
    write(tmp_path / "shift_2_0.json", [det()])
    with pytest.raises(DatasetError, match="shift outside grid"):
        load_predictions(tmp_path / "shift_2_0.json", ShiftGrid(1))


def test_deshift_on_ingest(tmp_path):
    p = write(tmp_path / "preds.json", [det(6, 5, shift=[1, 0])])
    pset = load_predictions(p, ShiftGrid(1), frame="shifted")
    assert pset.cells[(1, Shift(1, 0))][0].box == Box(5, 5, 2, 2)
    pset = load_predictions(p, ShiftGrid(1), frame="canonical")
    assert pset.cells[(1, Shift(1, 0))][0].box == Box(6, 5, 2, 2)


def test_bad_score_and_missing_shift(tmp_path):
    with pytest.raises(DatasetError, match=r"score outside \[0, 1\]"):
        load_predictions(write(tmp_path / "a.json", [det(score=1.5, shift=[0, 0])]), ShiftGrid(0))
    with pytest.raises(DatasetError, match="missing shift information"):
        load_predictions(write(tmp_path / "b.json", [det()]), ShiftGrid(0))
    with pytest.raises(DatasetError, match=r"\[record 1\]"):
        load_predictions(write(tmp_path / "c.json", [det(shift=[0, 0]), {"image_id": 1}]), ShiftGrid(0))


def test_missing_cells_are_empty(tmp_path):
    p = write(tmp_path / "preds.json", [det(shift=[0, 0])])
    pset = load_predictions(p, ShiftGrid(1), image_ids=[1, 2])
    assert pset.cells[(2, Shift(1, 1))] == ()
    assert len(pset.missing_cells()) == 7


def test_det_ids_follow_file_order(tmp_path):
    write(tmp_path / "shift_1_0.json", [det(score=0.1), det(score=0.2)])
    write(tmp_path / "shift_0_0.json", [det(score=0.3)])
    pset = load_predictions(tmp_path, ShiftGrid(1), image_ids=[1])
    assert [d.det_id for d in pset.cells[(1, Shift(0, 0))]] == [0]
    assert [d.det_id for d in pset.cells[(1, Shift(1, 0))]] == [1, 2]
    assert infer_max_shift(tmp_path) == 1


def test_shifted_canonical_round_trip(tmp_path):
    cfg = SimConfig(n_images=6, max_shift=2, box_jitter_sigma=1.5, score_jitter_sigma=0.1, drop_p=0.2, fp_rate=1.0, seed=5)
    gt, pset, _ = generate_dataset(cfg)
    write_predictions(pset, tmp_path / "shifted", frame="shifted")
    a = load_predictions(tmp_path / "shifted", ShiftGrid(2), frame="shifted", image_ids=gt.images)
    assert a.cells == pset.cells
    write_predictions(a, tmp_path / "canonical", frame="canonical")
    b = load_predictions(tmp_path / "canonical", ShiftGrid(2), frame="canonical", image_ids=gt.images)
    assert a.cells == b.cells


def test_manifest_fig2_example():
    from shiftap.dataset import ImageRecord

    m = emit_shift_manifest([ImageRecord(1, 4, 4)], ShiftGrid(1))
    assert len(m.entries) == 4
    assert {e.canvas for e in m.entries} == {(5, 5)}
    assert {e.offset for e in m.entries} == {(0, 0), (0, 1), (1, 0), (1, 1)}
    assert m.to_json()["entries"][1]["shifted_name"] == "1_shift_1_0.png"


def test_manifest_counts_and_policy():
    from shiftap.dataset import ImageRecord

    m0 = emit_shift_manifest([ImageRecord(1, 4, 4)], ShiftGrid(0))
    assert [(e.offset) for e in m0.entries] == [(0, 0)]
    imgs = [ImageRecord(1, 4, 4), ImageRecord(2, 10, 3)]
    assert len(emit_shift_manifest(imgs, ShiftGrid(3)).entries) == 32
    g = emit_shift_manifest(imgs, ShiftGrid(3), "global")
    assert {e.canvas for e in g.entries} == {(13, 7)}
    for e in g.entries:
        assert e.canvas[0] >= e.size[0] + 3 and e.canvas[1] >= e.size[1] + 3
    with pytest.raises(ValueError):
        emit_shift_manifest([], ShiftGrid(1))
