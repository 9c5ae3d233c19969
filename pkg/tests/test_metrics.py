import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import step_sum_ap
from ripstab.annotations import INTERPOLATED, MANUAL, DenseAnnotation
from ripstab.maskcore import BinaryMask, FrameGeometry
from ripstab.metrics import (
    EvalConfig,
    MissingAnnotationError,
    annotation_kappa,
    average_precision,
    cohen_kappa,
    evaluate_stream,
    f_beta,
    match_instances,
)
from ripstab.records import Detection

G = FrameGeometry(10, 10)


def box(r0, r1, c0, c1):
    bits = np.zeros(G.shape, bool)
    bits[r0:r1, c0:c1] = True
    return BinaryMask(bits)


# --- matching -------------------------------------------------------------------


def test_match_examples():
    gt = box(0, 5, 0, 5)
    r = match_instances([(gt, 0.9)], [gt])
    assert (r.tp, r.fp, r.fn) == (1, 0, 0)
    r = match_instances([(gt, 0.9)], [])
    assert (r.tp, r.fp, r.fn) == (0, 1, 0)
    r = match_instances([], [gt])
    assert (r.tp, r.fp, r.fn) == (0, 0, 1)


def test_match_greedy_by_score():
    gt = box(0, 10, 0, 10)  # 100 px
    p_07 = box(0, 7, 0, 10)  # iou 0.7
    p_09 = box(0, 9, 0, 10)  # iou 0.9
    r = match_instances([(p_07, 0.9), (p_09, 0.8)], [gt])
    assert (r.tp, r.fp, r.fn) == (1, 1, 0)
    assert r.matched_pairs == [(0, 0, pytest.approx(0.7))]
    assert r.correct == [True, False]


def test_match_respects_threshold():
    gt = box(0, 10, 0, 10)
    r = match_instances([(box(0, 4, 0, 10), 0.9)], [gt], 0.5)
    assert r.tp == 0
    r = match_instances([(box(0, 5, 0, 10), 0.9)], [gt], 0.5)
    assert r.tp == 1


def test_match_counts_invariant():
    rng = np.random.default_rng(4)
    for _ in range(100):
        preds = [(BinaryMask(rng.random(G.shape) < 0.5), float(rng.random())) for _ in range(rng.integers(0, 5))]
        gts = [BinaryMask(rng.random(G.shape) < 0.5) for _ in range(rng.integers(0, 5))]
        r = match_instances(preds, gts, 0.3)
        assert r.tp + r.fn == len(gts) and r.tp + r.fp == len(preds)
        assert len({j for _, j, _ in r.matched_pairs}) == r.tp
        assert all(v >= 0.3 for _, _, v in r.matched_pairs)


# --- AP -------------------------------------------------------------------------


def test_ap_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([True, False, True], 2) == pytest.approx(5 / 6)
    assert average_precision([False, False], 3) == 0.0


def test_ap_no_ground_truth_warns():
    with pytest.warns(UserWarning):
        assert average_precision([False], 0) == 0.0


def test_ap_sorts_by_score_stably():
    # equal scores keep input order
    assert average_precision([False, True], 1, scores=[0.5, 0.5]) == 0.5
    assert average_precision([False, True], 1, scores=[0.4, 0.5]) == 1.0


def test_ap_matches_step_sum_oracle():
    rng = np.random.default_rng(12)
    for _ in range(300):
        n = int(rng.integers(0, 21))
        flags = list(rng.random(n) < 0.5)
        total = sum(flags) + int(rng.integers(0, 4))
        if total == 0:
            continue
        assert abs(average_precision(flags, total) - float(step_sum_ap(flags, total))) <= 1e-12


def test_ap_all_orderings_small():
    for flags in itertools.product([False, True], repeat=6):
        for extra in (0, 2):
            total = sum(flags) + extra
            if total:
                assert average_precision(flags, total) == pytest.approx(float(step_sum_ap(flags, total)), abs=1e-12)


def test_coco_interp_differs_and_is_bounded():
    flags = [True, False, True]
    v = average_precision(flags, 2, coco_interp=True)
    assert 0 <= v <= 1
    # 101-point envelope: precision 1 up to recall .5, 2/3 after
    assert v == pytest.approx((51 * 1 + 50 * 2 / 3) / 101)


# --- F-beta / kappa -------------------------------------------------------------


def test_f_beta_examples():
    assert f_beta(0.683, 0.770, 2) == pytest.approx(0.751, abs=5e-4)
    assert f_beta(0.683, 0.770, 1) == pytest.approx(0.724, abs=5e-4)
    assert f_beta(0.0, 0.0) == 0.0


@settings(max_examples=200)
@given(st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0, 5))
def test_f_beta_bounds(p, r, beta):
    v = f_beta(p, r, beta)
    assert min(p, r) - 1e-12 <= v <= max(p, r) + 1e-12
    assert f_beta(p, p, beta) == pytest.approx(p)
    f1, f2 = f_beta(p, r, 1), f_beta(p, r, 2)
    if r > p:
        assert f2 >= f1 - 1e-12
    if p > r:
        assert f2 <= f1 + 1e-12


def test_kappa_examples():
    assert cohen_kappa([1, 0, 1, 2], [1, 0, 1, 2]) == 1.0
    assert cohen_kappa([1, 1, 0, 0], [1, 0, 1, 0]) == 0.0
    assert cohen_kappa(["a", "a"], ["a", "a"]) == 1.0
    with pytest.raises(ValueError):
        cohen_kappa([], [])
    with pytest.raises(ValueError):
        cohen_kappa([1], [1, 0])


def test_kappa_hand_computed():
    # confusion [[20, 5], [10, 15]]: p_o = .7, p_e = .5*.6 + .5*.4 = .5
    a = [0] * 25 + [1] * 25
    b = [0] * 20 + [1] * 5 + [0] * 10 + [1] * 15
    assert cohen_kappa(a, b) == pytest.approx(0.4)


def test_kappa_relabel_invariant():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 3, 50)
    b = np.where(rng.random(50) < 0.7, a, rng.integers(0, 3, 50))
    perm = np.array([2, 0, 1])
    assert cohen_kappa(a, b) == pytest.approx(cohen_kappa(perm[a], perm[b]))


def test_annotation_kappa_modes():
    m = box(0, 5, 0, 5)
    assert annotation_kappa([m], [m], mode="pixel") == 1.0
    assert annotation_kappa([True, False], [True, False], mode="frame") == 1.0
    with pytest.raises(ValueError):
        annotation_kappa([m], [m], mode="auto")


# --- evaluate_stream ------------------------------------------------------------


def dense(f, masks, prov=MANUAL):
    return DenseAnnotation(f, list(enumerate(masks)), prov)


def test_evaluate_perfect_and_empty():
    gts = {"v": {f: dense(f, [box(f % 5, 5 + f % 5, 0, 5)]) for f in range(6)}}
    preds = {"v": {f: [Detection(a.masks[0], 0.9)] for f, a in gts["v"].items()}}
    agg = evaluate_stream(preds, gts).aggregate
    assert (agg.precision, agg.recall, agg.ap50, agg.f1, agg.f2) == (1, 1, 1, 1, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        agg = evaluate_stream({}, gts).aggregate
    assert (agg.precision, agg.recall, agg.f2) == (0, 0, 0)


def test_evaluate_ignores_interpolated_frames():
    gt = box(0, 5, 0, 5)
    gts = {"v": {0: dense(0, [gt]), 1: dense(1, [gt], INTERPOLATED), 2: dense(2, [gt])}}
    base = {"v": {0: [Detection(gt, 0.9)], 2: [Detection(gt, 0.8)]}}
    noisy = {"v": {**base["v"], 1: [Detection(box(5, 9, 5, 9), 0.99), Detection(gt, 0.3)]}}
    a, b = evaluate_stream(base, gts).aggregate, evaluate_stream(noisy, gts).aggregate
    assert a == b
    assert a.frames_evaluated == 2


def test_evaluate_missing_annotation_is_error():
    gts = {"v": {0: dense(0, [])}}
    with pytest.raises(MissingAnnotationError, match=r"\[3, 4\]"):
        evaluate_stream({"v": {3: [Detection(box(0, 2, 0, 2), 0.9)], 4: [Detection(box(0, 2, 0, 2), 0.9)]}}, gts)


def test_evaluate_score_threshold_and_micro_average():
    gt = box(0, 5, 0, 5)
    gts = {"a": {0: dense(0, [gt])}, "b": {0: dense(0, [gt, box(6, 9, 6, 9)])}}
    preds = {"a": {0: [Detection(gt, 0.9)]}, "b": {0: [Detection(gt, 0.4), Detection(box(0, 3, 6, 9), 0.7)]}}
    rep = evaluate_stream(preds, gts, EvalConfig(score_threshold=0.5))
    b = rep.per_video["b"]
    assert (b.tp, b.fp, b.fn) == (0, 1, 2)
    agg = rep.aggregate
    assert (agg.tp, agg.fp, agg.fn) == (1, 1, 2)
    assert agg.precision == 0.5 and agg.recall == pytest.approx(1 / 3)
    # AP pools every prediction: ranks .9 (TP), .7 (FP), .4 (TP) over 3 truths
    assert agg.ap50 == pytest.approx(float(step_sum_ap([True, False, True], 3)))


def test_report_formats():
    gt = box(0, 5, 0, 5)
    rep = evaluate_stream({"v": {0: [Detection(gt, 0.9)]}}, {"v": {0: dense(0, [gt])}}, fps=12.5)
    d = rep.to_dict()
    assert d["fps"] == 12.5 and d["per_video"]["v"]["f2"] == 1.0
    text = rep.to_text()
    assert text.splitlines()[0].split()[:3] == ["video", "P", "R"]
    assert "ALL" in text and "fps: 12.50" in text
    assert rep.to_csv().splitlines()[0].startswith("video_id,precision,recall")
