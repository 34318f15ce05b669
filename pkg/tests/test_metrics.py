import math
import time

import numpy as np
import pytest

from app.services.hoi.cascade import ContactState, EventSource, InteractionEvent
from app.services.hoi.geometry import BBox, Side
from app.services.hoi.metrics import (
    ActiveObjectGT,
    HandGT,
    HoiFrameGT,
    Outcome,
    PointPrediction,
    default_thresholds,
    detection_metrics,
    downsample_indices,
    hoi_ap,
    hoi_ap_corpus,
    p_ap,
    point_match,
    pr_ap,
)
from app.utils.exceptions import EvaluationError
from tests.helpers import hand, obj
from tests.reference_metrics import reference_ap, reference_hoi_ap, reference_point_match


def test_pr_ap_single_tp():
    assert pr_ap([(0.9, Outcome.TP)], 1) == 1.0


def test_pr_ap_single_fp():
    assert pr_ap([(0.9, Outcome.FP)], 1) == 0.0


def test_pr_ap_fp_then_tp():
    assert pr_ap([(0.9, Outcome.FP), (0.8, Outcome.TP)], 1) == pytest.approx(0.5)


def test_pr_ap_no_ground_truth():
    assert pr_ap([], 0) == 1.0
    assert pr_ap([(0.3, Outcome.FP)], 0) == 0.0


def test_pr_ap_no_predictions():
    assert pr_ap([], 3) == 0.0


def test_point_match_favors_high_confidence_near_prediction():
    preds = [PointPrediction(98, 0.9), PointPrediction(300, 0.8)]
    records = point_match(preds, [100], 30)
    assert [(r.confidence, r.outcome) for r in records] == [(0.9, Outcome.TP), (0.8, Outcome.FP)]
    assert p_ap(preds, [100], [30]).mean == 1.0


def test_point_match_greedy_order_sensitivity():
    preds = [PointPrediction(300, 0.9), PointPrediction(98, 0.8)]
    records = point_match(preds, [100], 30)
    assert [(r.confidence, r.outcome) for r in records] == [(0.9, Outcome.FP), (0.8, Outcome.TP)]
    assert p_ap(preds, [100], [30]).mean == pytest.approx(0.5)


def test_point_match_no_predictions():
    assert point_match([], [100], 30) == []
    assert p_ap([], [100], [30]).mean == 0.0


def test_point_match_equidistant_prefers_earlier_gt():
    (record,) = point_match([PointPrediction(50, 0.9)], [60, 40], 10)
    assert record.outcome == Outcome.TP
    assert record.gt_index == 1


def test_p_ap_reports_each_threshold():
    preds = [PointPrediction(110, 0.9), PointPrediction(400, 0.5)]
    report = p_ap(preds, [100, 420], [5, 30])
    assert report.per_threshold == {5: 0.0, 30: 1.0}
    assert report.mean == 0.5


def test_p_ap_rejects_unsorted_thresholds():
    with pytest.raises(ValueError):
        p_ap([], [1], [30, 10])


def test_default_thresholds():
    assert default_thresholds(30.0) == [30 * s for s in range(1, 11)]


def _random_points(rng, n_pred, n_gt, length=600):
    preds = [PointPrediction(int(f), float(c)) for f, c in zip(rng.integers(0, length, n_pred), rng.random(n_pred))]
    gt = [int(f) for f in rng.integers(0, length, n_gt)]
    return preds, gt


def test_point_metrics_match_reference():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for _ in range(1000):
        preds, gt = _random_points(rng, int(rng.integers(0, 51)), int(rng.integers(0, 21)))
        threshold = int(rng.integers(0, 60))
        records = point_match(preds, gt, threshold)
        expected = reference_point_match(preds, gt, threshold)
        assert [(r.confidence, r.outcome == Outcome.TP) for r in records] == expected
        assert pr_ap([(r.confidence, r.outcome) for r in records], len(gt)) == pytest.approx(
            reference_ap(expected, len(gt)), abs=1e-12
        )
    assert time.perf_counter() - start < 10.0


def test_point_match_partitions_predictions():
    rng = np.random.default_rng(99)
    for _ in range(200):
        preds, gt = _random_points(rng, int(rng.integers(0, 30)), int(rng.integers(0, 15)))
        records = point_match(preds, gt, 20)
        tp = [r for r in records if r.outcome == Outcome.TP]
        assert sorted(r.prediction_index for r in records) == list(range(len(preds)))
        assert len(tp) <= min(len(preds), len(gt))
        assert len({r.gt_index for r in tp}) == len(tp)


def test_p_ap_monotone_in_threshold():
    rng = np.random.default_rng(31)
    for _ in range(200):
        preds, gt = _random_points(rng, int(rng.integers(1, 30)), int(rng.integers(1, 15)))
        report = p_ap(preds, gt, [0, 5, 15, 30, 90, 300])
        values = [report.per_threshold[t] for t in sorted(report.per_threshold)]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


def test_pr_ap_append_properties():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(1, 20))
        records = [(float(c), bool(t)) for c, t in zip(rng.uniform(0.1, 0.9, n), rng.random(n) < 0.5)]
        n_gt = int(rng.integers(sum(t for _, t in records), n + 5)) or 1
        base = pr_ap(records, n_gt)
        assert 0.0 <= base <= 1.0
        assert pr_ap(records + [(0.0, False)], n_gt) <= base + 1e-12
        assert pr_ap([(1.0, True)] + records, n_gt + 1) >= base - 1e-12


# HOI AP


def _gt_frame(f, hands, objects=()):
    return HoiFrameGT(f, tuple(hands), tuple(objects))


def _copy_event(gt: HoiFrameGT, flip_state=False):
    """由真值构造完全一致的预测事件"""
    hands = [hand(h.bbox.as_list(), confidence=1.0) for h in gt.hands]
    hands = [type(h)(h.detection, g.side) for h, g in zip(hands, gt.hands)]
    contact_idx = [i for i, g in enumerate(gt.hands) if g.state == ContactState.CONTACT]
    if contact_idx and not flip_state:
        i = contact_idx[0]
        linked = [o for o in gt.active_objects if o.hand_side == gt.hands[i].side][0]
        return InteractionEvent(
            gt.frame_index,
            tuple(hands),
            ContactState.CONTACT,
            obj(linked.bbox.as_list(), class_id=linked.class_id, confidence=1.0),
            EventSource.FUSED,
            matched_hand=hands[i],
            association_iou=0.3,
        )
    if flip_state and not contact_idx:
        return InteractionEvent(
            gt.frame_index,
            tuple(hands),
            ContactState.CONTACT,
            obj([0, 0, 5, 5], confidence=1.0),
            EventSource.FUSED,
            matched_hand=hands[0],
            association_iou=0.3,
        )
    return InteractionEvent(gt.frame_index, tuple(hands), ContactState.NO_CONTACT, None, EventSource.OD_SUPPRESSED)


def _fixture_gt():
    return [
        _gt_frame(
            10,
            [
                HandGT(BBox(100, 200, 180, 280), Side.LEFT, ContactState.CONTACT),
                HandGT(BBox(500, 380, 580, 460), Side.RIGHT, ContactState.NO_CONTACT),
            ],
            [ActiveObjectGT(BBox(110, 150, 170, 210), 2, Side.LEFT)],
        ),
        _gt_frame(
            40,
            [
                HandGT(BBox(40, 380, 120, 460), Side.LEFT, ContactState.NO_CONTACT),
                HandGT(BBox(420, 200, 500, 280), Side.RIGHT, ContactState.CONTACT),
            ],
            [ActiveObjectGT(BBox(430, 150, 490, 210), 4, Side.RIGHT)],
        ),
    ]


def test_hoi_ap_identity():
    gt = _fixture_gt()
    report = hoi_ap([_copy_event(g) for g in gt], gt)
    assert report.to_dict() == {"ap_hand": 1.0, "ap_hand_state": 1.0, "ap_hand_side": 1.0, "ap_hand_all": 1.0}


def test_hoi_ap_flipped_states():
    gt = [
        _gt_frame(5, [HandGT(BBox(100, 200, 180, 280), Side.LEFT, ContactState.CONTACT)]),
        _gt_frame(9, [HandGT(BBox(500, 200, 580, 280), Side.RIGHT, ContactState.NO_CONTACT)]),
    ]
    report = hoi_ap([_copy_event(g, flip_state=True) for g in gt], gt)
    assert report.ap_hand == 1.0
    assert report.ap_hand_state == 0.0


def test_hoi_ap_wrong_object_fails_all_only():
    gt = _fixture_gt()
    events = [_copy_event(g) for g in gt]
    first = events[0]
    events[0] = InteractionEvent(
        first.frame_index,
        first.hands,
        ContactState.CONTACT,
        obj(first.active_object.bbox.as_list(), class_id=5, confidence=1.0),
        EventSource.FUSED,
        matched_hand=first.matched_hand,
    )
    report = hoi_ap(events, gt)
    assert report.ap_hand == report.ap_hand_state == report.ap_hand_side == 1.0
    assert report.ap_hand_all < 1.0


def test_hoi_ap_unknown_frame_raises():
    gt = _fixture_gt()
    event = _copy_event(gt[0])
    moved = InteractionEvent(77, event.hands, event.contact_state, event.active_object, event.source, event.matched_hand)
    with pytest.raises(EvaluationError):
        hoi_ap([moved], gt)


def test_hoi_ap_corpus_keeps_videos_apart():
    gt = _fixture_gt()
    events = [_copy_event(g) for g in gt]
    report = hoi_ap_corpus({"a": (events, gt), "b": ([], gt)})
    assert report.ap_hand == pytest.approx(0.5)


def _random_hoi_instance(rng):
    gt_frames, events = [], []
    for f in range(int(rng.integers(1, 6))):
        gt_hands, gt_objects = [], []
        for si in rng.permutation(2)[: int(rng.integers(1, 3))]:
            side = (Side.LEFT, Side.RIGHT)[int(si)]
            x = float(rng.uniform(0, 250)) + (320 if side == Side.RIGHT else 0)
            y = float(rng.uniform(40, 300))
            state = ContactState.CONTACT if rng.random() < 0.5 else ContactState.NO_CONTACT
            gt_hands.append(HandGT(BBox(x, y, x + 60, y + 60), side, state))
            if state == ContactState.CONTACT and rng.random() < 0.8:
                gt_objects.append(ActiveObjectGT(BBox(x + 10, y - 30, x + 60, y + 20), int(rng.integers(1, 4)), side))
        gt_frames.append(_gt_frame(f, gt_hands, gt_objects))

        pred_hands = []
        for g in gt_hands:
            if rng.random() < 0.2:
                continue
            dx, dy = rng.normal(0, 12, size=2)
            bb = [max(0.0, g.bbox.x_min + dx), max(0.0, g.bbox.y_min + dy), g.bbox.x_max + dx + 30, g.bbox.y_max + dy + 30]
            pred_hands.append(hand(bb, confidence=float(rng.random())))
        if rng.random() < 0.3:
            pred_hands.append(hand([600, 400, 630, 430], confidence=float(rng.random())))
        pred_hands = pred_hands[:2]
        if not pred_hands:
            continue
        if rng.random() < 0.6:
            i = int(rng.integers(len(pred_hands)))
            ref = gt_objects[0].bbox if gt_objects else BBox(0, 0, 40, 40)
            o = obj(ref.as_list(), class_id=int(rng.integers(1, 4)), confidence=float(rng.random()))
            events.append(
                InteractionEvent(f, tuple(pred_hands), ContactState.CONTACT, o, EventSource.FUSED, pred_hands[i], 0.2)
            )
        else:
            events.append(InteractionEvent(f, tuple(pred_hands), ContactState.NO_CONTACT, None, EventSource.OD_SUPPRESSED))
    return events, gt_frames


def _as_dict_gt(g: HoiFrameGT):
    return {
        "frame_index": g.frame_index,
        "hands": [{"bbox": h.bbox.as_list(), "side": h.side.value, "state": h.state.value} for h in g.hands],
        "active_objects": [
            {"bbox": o.bbox.as_list(), "class_id": o.class_id, "hand_side": o.hand_side.value} for o in g.active_objects
        ],
    }


def test_hoi_ap_matches_reference_and_hierarchy():
    rng = np.random.default_rng(77)
    start = time.perf_counter()
    for _ in range(1000):
        events, gt = _random_hoi_instance(rng)
        report = hoi_ap(events, gt)
        expected = reference_hoi_ap([e.to_dict() for e in events], [_as_dict_gt(g) for g in gt])
        assert report.ap_hand == pytest.approx(expected["hand"], abs=1e-12)
        assert report.ap_hand_state == pytest.approx(expected["state"], abs=1e-12)
        assert report.ap_hand_side == pytest.approx(expected["side"], abs=1e-12)
        assert report.ap_hand_all == pytest.approx(expected["all"], abs=1e-12)
        assert report.ap_hand_all <= report.ap_hand_state <= report.ap_hand + 1e-12
        assert report.ap_hand_all <= report.ap_hand_side <= report.ap_hand + 1e-12
    assert time.perf_counter() - start < 10.0


# 检测器指标


def test_detection_metrics_perfect_and_recall_threshold():
    gt = {("v", 0): [(BBox(0, 0, 10, 10), 0), (BBox(50, 50, 80, 80), 2)]}
    perfect = {("v", 0): [hand([0, 0, 10, 10], 0.95).detection, obj([50, 50, 80, 80], class_id=2, confidence=0.9)]}
    report = detection_metrics(perfect, gt)
    assert report.ap == 1.0 and report.recall == 1.0 and report.hm == 1.0

    weak = {("v", 0): [hand([0, 0, 10, 10], 0.95).detection, obj([50, 50, 80, 80], class_id=2, confidence=0.5)]}
    report = detection_metrics(weak, gt, conf_threshold=0.7)
    assert report.recall == 0.5
    assert report.per_class_ap == {0: 1.0, 2: 0.0}


def test_detection_metrics_class_aware():
    gt = {("v", 0): [(BBox(50, 50, 80, 80), 2)]}
    wrong_class = {("v", 0): [obj([50, 50, 80, 80], class_id=3, confidence=0.9)]}
    report = detection_metrics(wrong_class, gt)
    assert report.ap == 0.0 and report.hm == 0.0


# 降帧


def test_downsample_worked_examples():
    assert downsample_indices(30, 30, 4) == [0, 7, 15, 22]
    assert downsample_indices(30, 30, 4, {5}) == [0, 5, 7, 15, 22]
    assert downsample_indices(12, 30, 30) == list(range(12))


def test_downsample_rejects_out_of_range_positive():
    with pytest.raises(ValueError):
        downsample_indices(30, 30, 4, {30})
    with pytest.raises(ValueError):
        downsample_indices(30, 4, 30)


def test_downsample_random_cases():
    rng = np.random.default_rng(500)
    for _ in range(500):
        n = int(rng.integers(1, 400))
        src = float(rng.choice([24.0, 25.0, 30.0, 60.0]))
        dst = float(rng.uniform(1.0, src))
        positives = {int(p) for p in rng.integers(0, n, int(rng.integers(0, 10)))}
        out = downsample_indices(n, src, dst, positives)
        expected = {math.floor(k * src / dst) for k in range(n + 1)}
        expected = {i for i in expected if i < n} | positives
        assert out == sorted(expected)
        assert positives <= set(out)
        assert len(out) <= math.ceil(n * dst / src) + 1 + len(positives)
