import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_idtp
from utt.metrics import SUCCESS_THRESHOLDS, merge_sot_reports, mot_metrics, sot_metrics, success_curve


def box(x, y, w=10, h=10):
    return np.array([x, y, x + w, y + h], float)


def two_objects(frames, ids_a=1, ids_b=2):
    """GT with object 1 at x=0 and object 2 at x=50; hypothesis ids may vary per frame."""
    gt, res = {}, {}
    for t in range(frames):
        a = ids_a(t) if callable(ids_a) else ids_a
        b = ids_b(t) if callable(ids_b) else ids_b
        gt[t] = [(1, box(t, 0)), (2, box(50 + t, 0))]
        res[t] = [(a, box(t, 0)), (b, box(50 + t, 0))]
    return res, gt


def test_perfect_results():
    res, gt = two_objects(5)
    r = mot_metrics(res, gt)
    assert (r.mota, r.idf1, r.idsw, r.fp, r.fn) == (1.0, 1.0, 0, 0, 0)
    assert r.motp == 1.0
    assert (r.mt, r.ml) == (2, 0)


def test_one_miss_one_false_positive_one_switch():
    # 10 GT boxes over 5 frames; object 2 changes id at frame 2 and is missed at frame 4
    res, gt = two_objects(5, ids_b=lambda t: 2 if t < 2 else 3)
    res[4] = [res[4][0], (9, box(100, 100))]
    r = mot_metrics(res, gt)
    assert (r.fn, r.fp, r.idsw, r.num_gt) == (1, 1, 1, 10)
    assert r.mota == pytest.approx(0.7, abs=1e-12)


def test_swapped_ids_mid_sequence():
    res, gt = two_objects(4, ids_a=lambda t: 1 if t < 2 else 2, ids_b=lambda t: 2 if t < 2 else 1)
    r = mot_metrics(res, gt)
    assert r.idsw == 2
    pairs = {(1, 1): 2, (1, 2): 2, (2, 2): 2, (2, 1): 2}
    idtp = brute_force_idtp(pairs, [1, 2], [1, 2])
    assert idtp == 4
    assert r.idf1 == pytest.approx(2 * idtp / (8 + 8)) == 0.5
    assert r.idf1 < 1


def test_match_persistence_keeps_previous_correspondence():
    # at frame 1 a second hypothesis overlaps object 1 better, but the old pairing still passes the gate
    gt = {0: [(1, box(0, 0))], 1: [(1, box(0, 0))]}
    res = {0: [(5, box(0, 0))], 1: [(5, box(2, 0)), (6, box(0, 0))]}
    r = mot_metrics(res, gt)
    assert (r.idsw, r.fp) == (0, 1)


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        mot_metrics({0: [(1, box(0, 0)), (1, box(20, 0))]}, {0: [(1, box(0, 0))]})


def test_empty_results_give_zero_mota():
    _, gt = two_objects(3)
    r = mot_metrics({}, gt)
    assert r.mota == 0.0 and r.fn == 6 and r.fp == 0 and r.idsw == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 4), st.integers(0, 1))
def test_removing_a_true_positive_costs_one_over_num_gt(t, k):
    res, gt = two_objects(5)
    res[t] = [row for i, row in enumerate(res[t]) if i != k]
    assert mot_metrics(res, gt).mota == pytest.approx(1 - 1 / 10)


@settings(max_examples=20, deadline=None)
@given(st.permutations([1, 2, 3]))
def test_consistent_id_relabelling_is_invisible(perm):
    res, gt = two_objects(6, ids_b=lambda t: 2 if t < 3 else 3)
    relabel = dict(zip([1, 2, 3], perm))
    moved = {t: [(relabel[i], b) for i, b in rows] for t, rows in res.items()}
    a, b = mot_metrics(res, gt), mot_metrics(moved, gt)
    assert (a.mota, a.motp, a.idf1, a.idsw) == (b.mota, b.motp, b.idf1, b.idsw)


def test_success_from_threshold_sweep():
    gt = [box(0, 0)] * 2
    preds = [box(0, 0, w=5), box(0, 0, w=7)]  # IoU 0.5 and 0.7
    r = sot_metrics(preds, gt)
    sweep = np.mean([np.mean([0.5 > t, 0.7 > t]) for t in SUCCESS_THRESHOLDS])
    assert r.success_auc == pytest.approx(sweep) == pytest.approx(12 / 21)
    assert r.ious == pytest.approx([0.5, 0.7])
    assert r.op75 == 0.0


def test_sot_perfect_and_hopeless():
    gt = [box(0, 0), box(5, 5)]
    r = sot_metrics(gt, gt)
    assert (r.success_auc, r.precision, r.op75) == (1.0, 1.0, 1.0)
    far = sot_metrics([box(100, 100)] * 2, gt)
    assert (far.success_auc, far.precision, far.op75) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        sot_metrics(gt[:1], gt)


def test_precision_threshold_is_inclusive():
    r = sot_metrics([box(20, 0)], [box(0, 0)])
    assert r.precision == 1.0
    assert sot_metrics([box(20.5, 0)], [box(0, 0)]).precision == 0.0


def test_success_curve_is_non_increasing():
    curve = success_curve(np.random.default_rng(0).uniform(0, 1, 50))
    assert (np.diff(curve) <= 0).all()


def test_merge_weights_by_frames():
    a = sot_metrics([box(0, 0)], [box(0, 0)])
    b = sot_metrics([box(100, 0)] * 3, [box(0, 0)] * 3)
    merged = merge_sot_reports([a, b])
    assert merged.precision == pytest.approx(0.25)
    assert len(merged.ious) == 4
