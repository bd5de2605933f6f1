import random

from hypothesis import given, settings, strategies as st

from conftest import make_gt, make_pset, random_instance
from shiftap.dataset import Detection
from shiftap.evaluator import compute_ap
from shiftap.geometry import Box, Shift, ShiftGrid, iou
from shiftap.tta import NmsConfig, as_prediction_set, nms, to_records, tta_aggregate

ZERO = Shift(0, 0)


def d(x, y, score, cat=1, det_id=0, w=10, h=10):
    return Detection(1, cat, Box(x, y, w, h), score, det_id)


def test_single_detection():
    assert nms([d(0, 0, 0.5)]) == [d(0, 0, 0.5)]


def test_overlapping_same_class():
    a, b = d(0, 0, 0.9, det_id=0), d(0, 0, 0.8, det_id=1, w=8)  # IoU 0.8
    assert iou(a.box, b.box) == 0.8
    assert nms([b, a]) == [a]


def test_class_aware():
    a, b = d(0, 0, 0.9, cat=1, det_id=0), d(0, 0, 0.8, cat=2, det_id=1, w=8)
    assert nms([a, b]) == [a, b]
    assert nms([a, b], NmsConfig(class_aware=False)) == [a]


def test_threshold_is_strict():
    a, b = d(0, 0, 0.9, det_id=0), d(0, 0, 0.8, det_id=1, w=5)  # IoU exactly 0.5
    assert nms([a, b]) == [a, b]


random_dets = st.lists(
    st.builds(
        lambda x, y, w, h, s, c: (x, y, w, h, s, c),
        st.integers(0, 40), st.integers(0, 40), st.integers(1, 20), st.integers(1, 20),
        st.sampled_from([0.1, 0.5, 0.5, 0.9]) | st.floats(0, 1), st.integers(1, 2),
    ),
    max_size=30,
)


@settings(max_examples=200, deadline=None)
@given(random_dets, st.floats(0.05, 1.0), st.booleans())
def test_nms_properties(raw, thr, aware):
    dets = [Detection(1, c, Box(x, y, w, h), s, k) for k, (x, y, w, h, s, c) in enumerate(raw)]
    cfg = NmsConfig(thr, aware)
    once = nms(dets, cfg)
    assert nms(once, cfg) == once
    assert set(once) <= set(dets)
    assert len(once) <= len(dets)
    assert once == sorted(once, key=lambda x: (-x.score, x.det_id))


def test_single_shift_grid_equals_nms_of_baseline(rng):
    gt, pset = random_instance(rng, n_images=4, max_shift=0)
    agg = tta_aggregate(pset)
    for i in pset.image_ids:
        base = nms(pset.cells[(i, ZERO)])
        assert [(x.box, x.score, x.category_id) for x in agg[i]] == [(x.box, x.score, x.category_id) for x in base]


def test_identical_copies_collapse_to_smallest_shift():
    dets = [(1, (10, 10, 20, 20), 0.9), (2, (50, 50, 5, 5), 0.4)]
    pset = make_pset({(1, (s.dx, s.dy)): dets for s in ShiftGrid(1)}, max_shift=1)
    agg = tta_aggregate(pset)[1]
    assert [(x.category_id, x.box, x.score) for x in agg] == [(1, Box(10, 10, 20, 20), 0.9), (2, Box(50, 50, 5, 5), 0.4)]
    # survivors are the copies pooled first, i.e. from shift (0, 0)
    assert [x.det_id for x in agg] == [0, 1]


def test_isolated_detection_survives():
    cells = {(1, (0, 0)): [(1, (10, 10, 20, 20), 0.9)], (1, (1, 0)): [(1, (60, 60, 10, 10), 0.3)]}
    agg = tta_aggregate(make_pset(cells, max_shift=1))[1]
    assert Box(60, 60, 10, 10) in [x.box for x in agg]


def test_aggregate_feeds_back_into_evaluator(rng):
    gt, pset = random_instance(rng, n_images=3, max_shift=1)
    agg = tta_aggregate(pset)
    tset = as_prediction_set(agg)
    r = compute_ap({i: ZERO for i in tset.image_ids}, tset, gt)
    assert -1 <= r.ap50 <= 1
    recs = to_records(agg)
    assert all("shift" not in r for r in recs)
    assert len(recs) == sum(len(v) for v in agg.values())
