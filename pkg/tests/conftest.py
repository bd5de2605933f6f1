import random

import pytest

from shiftap.dataset import Detection, ShiftedPredictionSet, parse_ground_truth
from shiftap.geometry import Box, Shift, ShiftGrid


def make_gt(annotations, n_images=1, categories=(1,), size=(100, 100)):
    """annotations: iterable of (image_id, category_id, (x, y, w, h)[, iscrowd])."""
    anns = []
    for k, a in enumerate(annotations):
        crowd = a[3] if len(a) > 3 else 0
        anns.append({"id": k + 1, "image_id": a[0], "category_id": a[1], "bbox": list(a[2]), "iscrowd": crowd})
    return parse_ground_truth(
        {
            "images": [{"id": i, "width": size[0], "height": size[1]} for i in range(1, n_images + 1)],
            "annotations": anns,
            "categories": [{"id": c, "name": str(c)} for c in categories],
        }
    )


def make_pset(cells, n_images=1, max_shift=0):
    """cells: {(image_id, (dx, dy)): [(category, (x, y, w, h), score), ...]} in canonical frame."""
    grid = ShiftGrid(max_shift)
    ids = tuple(range(1, n_images + 1))
    out = {}
    det_id = 0
    for s in grid:
        for i in ids:
            dets = []
            for c, b, score in cells.get((i, (s.dx, s.dy)), []):
                dets.append(Detection(i, c, Box(*b), score, det_id))
                det_id += 1
            out[(i, s)] = tuple(dets)
    return ShiftedPredictionSet(grid, ids, out, frozenset(out))


def random_instance(rng: random.Random, n_images=3, max_shift=1, n_cats=2, size=60):
    """Small random GT + shifted predictions with plenty of score ties and near misses."""
    anns = []
    objects = {}
    for i in range(1, n_images + 1):
        objects[i] = []
        for _ in range(rng.randint(0, 3)):
            w, h = rng.choice([8, 10, 12, 16]), rng.choice([8, 10, 12, 16])
            b = (rng.randint(0, size - w), rng.randint(0, size - h), w, h)
            c = rng.randint(1, n_cats)
            crowd = 1 if rng.random() < 0.1 else 0
            anns.append((i, c, b, crowd))
            objects[i].append((c, b))
    gt = make_gt(anns, n_images=n_images, categories=range(1, n_cats + 1), size=(size, size))
    cells = {}
    for i in range(1, n_images + 1):
        for s in ShiftGrid(max_shift):
            dets = []
            for c, (x, y, w, h) in objects[i]:
                if rng.random() < 0.3:
                    continue
                j = rng.choice([0, 0, 1, 2, 4])
                dets.append((c, (x + rng.randint(-j, j), y + rng.randint(-j, j), w, h), rng.choice([0.3, 0.5, 0.7, 0.9, rng.random()])))
            for _ in range(rng.randint(0, 2)):
                dets.append((rng.randint(1, n_cats), (rng.randint(0, size - 10), rng.randint(0, size - 10), 10, 10), rng.choice([0.5, rng.random()])))
            cells[(i, (s.dx, s.dy))] = dets
    return gt, make_pset(cells, n_images=n_images, max_shift=max_shift)


@pytest.fixture
def rng():
    return random.Random(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
