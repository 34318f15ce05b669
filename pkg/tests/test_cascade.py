import numpy as np
import pytest

from app.services.backends.base import Detector, Recognizer
from app.services.hoi.association import AssociationConfig, ActiveObjectResult
from app.services.hoi.cascade import (
    CascadeConfig,
    CascadeRunner,
    ContactLabel,
    ContactPrediction,
    ContactState,
    EventSource,
    FramePacket,
    InteractionEvent,
    TriggerDecision,
    TriggerMode,
    TriggerWindow,
    fuse,
    push_prediction,
    run_offline,
)
from app.services.hoi.geometry import ImageGeometry
from app.utils.exceptions import BackendError, ContractViolationError, StreamOrderError
from tests.helpers import hand, obj

GEOM = ImageGeometry(640, 480)


class ListRecognizer(Recognizer):
    def __init__(self, confidences):
        super().__init__()
        self.confidences = confidences

    def _predict(self, frame_index, image):
        return ContactPrediction.from_confidence(frame_index, self.confidences.get(frame_index, 0.0))


class OverlapDetector(Detector):
    """每帧输出一只手；overlap_frames 中的帧再输出一个与手重叠的物体"""

    def __init__(self, overlap_frames=()):
        super().__init__()
        self.overlap_frames = set(overlap_frames)
        self.frames = []

    def _detect(self, frame_index, image):
        self.frames.append(frame_index)
        dets = [hand([100, 100, 180, 180]).detection]
        if frame_index in self.overlap_frames:
            dets.append(obj([120, 120, 200, 200], class_id=2))
        return dets


def contact(f, c=0.95):
    return ContactPrediction(f, c, ContactLabel.CONTACT)


def background(f, c=0.1):
    return ContactPrediction(f, c, ContactLabel.BACKGROUND)


def test_current_frame_contact_triggers():
    window = TriggerWindow(30)
    assert push_prediction(window, contact(100)) == TriggerDecision.INVOKE_OD


def test_window_keeps_triggering_for_preceding_frames():
    window = TriggerWindow(30)
    push_prediction(window, contact(100))
    for f in range(101, 131):
        assert push_prediction(window, background(f)) == TriggerDecision.INVOKE_OD
    assert push_prediction(window, background(131)) == TriggerDecision.SKIP


@pytest.mark.parametrize("size", [0, -1])
def test_window_must_cover_at_least_one_frame(size):
    with pytest.raises(ValueError):
        TriggerWindow(size)
    with pytest.raises(ValueError):
        CascadeConfig(window_frames=size)


def test_smallest_window():
    window = TriggerWindow(1)
    assert push_prediction(window, contact(5)) == TriggerDecision.INVOKE_OD
    assert push_prediction(window, background(6)) == TriggerDecision.INVOKE_OD
    assert push_prediction(window, background(7)) == TriggerDecision.SKIP


def test_current_mode_uses_only_current_prediction():
    recognizer = ListRecognizer({5: 0.8, 9: 0.7})
    detector = OverlapDetector(overlap_frames={5})
    cfg = CascadeConfig(mode=TriggerMode.CURRENT)
    events = run_offline((FramePacket(f) for f in range(12)), recognizer, detector, cfg, GEOM)
    assert detector.frames == [5, 9]
    assert [(e.frame_index, e.contact_state) for e in events] == [
        (5, ContactState.CONTACT),
        (9, ContactState.NO_CONTACT),
    ]


def test_current_mode_rejects_out_of_order_frames():
    runner = CascadeRunner(ListRecognizer({}), OverlapDetector(), GEOM, CascadeConfig(mode=TriggerMode.CURRENT))
    runner.process(FramePacket(3))
    with pytest.raises(StreamOrderError):
        runner.process(FramePacket(3))


def test_non_monotone_push_rejected():
    window = TriggerWindow(30)
    push_prediction(window, background(10))
    with pytest.raises(StreamOrderError):
        push_prediction(window, background(10))
    with pytest.raises(StreamOrderError):
        push_prediction(window, background(3))


def test_trigger_prediction_uses_window_maximum():
    window = TriggerWindow(30)
    push_prediction(window, contact(10, 0.7))
    push_prediction(window, contact(12, 0.9))
    push_prediction(window, background(20))
    pred = window.trigger_prediction(20)
    assert pred.frame_index == 20
    assert pred.is_contact
    assert pred.confidence == 0.9


def test_larger_window_is_superset():
    rng = np.random.default_rng(17)
    labels = rng.random(2000) < 0.03
    decisions = {}
    for size in (1, 30, 60):
        window = TriggerWindow(size)
        decisions[size] = {
            f
            for f, positive in enumerate(labels)
            if push_prediction(window, contact(f) if positive else background(f)) == TriggerDecision.INVOKE_OD
        }
    assert decisions[1] <= decisions[30] <= decisions[60]


def test_fuse_contact_with_overlap():
    h = hand([100, 100, 180, 180])
    o = obj([120, 120, 200, 200])
    event = fuse(contact(7), [h], ActiveObjectResult(o, h, 0.4))
    assert event.contact_state == ContactState.CONTACT
    assert event.active_object == o
    assert event.source == EventSource.FUSED
    assert event.hand_state(h) == ContactState.CONTACT


def test_fuse_contact_without_overlap_is_suppressed():
    h = hand([100, 100, 180, 180])
    event = fuse(contact(7), [h], None)
    assert event.contact_state == ContactState.NO_CONTACT
    assert event.active_object is None
    assert event.source == EventSource.OD_SUPPRESSED


def test_fuse_rejects_background():
    with pytest.raises(ContractViolationError):
        fuse(background(7), [hand([0, 0, 10, 10])], None)


def test_event_with_object_must_be_contact():
    h = hand([100, 100, 180, 180])
    with pytest.raises(ContractViolationError):
        InteractionEvent(7, (h,), ContactState.NO_CONTACT, obj([0, 0, 5, 5]), EventSource.FUSED)


def test_event_dict_round_trip():
    h = hand([100, 100, 180, 180])
    o = obj([120, 120, 200, 200], class_id=3)
    event = fuse(contact(7), [h, hand([500, 300, 580, 380], 0.6)], ActiveObjectResult(o, h, 0.4))
    assert InteractionEvent.from_dict(event.to_dict()) == event


def test_detector_called_only_on_triggered_frames():
    confidences = {10: 0.9, 50: 0.8, 200: 0.6}
    recognizer = ListRecognizer(confidences)
    detector = OverlapDetector(overlap_frames={10, 11, 55})
    cfg = CascadeConfig(window_frames=30)
    events = run_offline((FramePacket(f) for f in range(300)), recognizer, detector, cfg, GEOM)

    expected = set(range(10, 41)) | set(range(50, 81)) | set(range(200, 231))
    assert set(detector.frames) == expected
    assert detector.calls == len(expected)
    assert recognizer.calls == 300
    assert [e.frame_index for e in events] == sorted(expected)
    states = {e.frame_index: e.contact_state for e in events}
    assert states[10] == ContactState.CONTACT
    assert states[55] == ContactState.CONTACT
    assert states[12] == ContactState.NO_CONTACT


def test_recognizer_threshold_from_config():
    recognizer = ListRecognizer({5: 0.4})
    detector = OverlapDetector()
    strict = CascadeConfig(mode=TriggerMode.CURRENT, recognizer_threshold=0.5)
    run_offline((FramePacket(f) for f in range(10)), recognizer, detector, strict, GEOM)
    assert detector.calls == 0

    detector = OverlapDetector()
    lenient = CascadeConfig(mode=TriggerMode.CURRENT, recognizer_threshold=0.3)
    run_offline((FramePacket(f) for f in range(10)), ListRecognizer({5: 0.4}), detector, lenient, GEOM)
    assert detector.frames == [5]


def test_baseline_invokes_detector_every_frame():
    detector = OverlapDetector(overlap_frames={3})
    cfg = CascadeConfig(mode=TriggerMode.BASELINE, association=AssociationConfig(iou_threshold=0.01))
    events = run_offline((FramePacket(f) for f in range(6)), None, detector, cfg, GEOM)
    assert detector.calls == 6
    assert [e.contact_state for e in events] == [ContactState.NO_CONTACT] * 3 + [ContactState.CONTACT] + [
        ContactState.NO_CONTACT
    ] * 2
    assert all(e.source == EventSource.OVERLAP for e in events)


@pytest.mark.parametrize("mode", [TriggerMode.WINDOW, TriggerMode.CURRENT])
def test_gated_modes_require_recognizer(mode):
    with pytest.raises(ContractViolationError):
        CascadeRunner(None, OverlapDetector(), GEOM, CascadeConfig(mode=mode))


def test_backend_failure_carries_frame_context():
    class FailingDetector(Detector):
        def _detect(self, frame_index, image):
            raise RuntimeError("boom")

    runner = CascadeRunner(ListRecognizer({4: 1.0}), FailingDetector(), GEOM, CascadeConfig(mode=TriggerMode.CURRENT))
    for f in range(4):
        assert runner.process(FramePacket(f)) is None
    with pytest.raises(BackendError) as err:
        runner.process(FramePacket(4))
    assert err.value.frame_index == 4


def test_detector_confidence_filter():
    class LowConfidenceDetector(Detector):
        def _detect(self, frame_index, image):
            return [hand([100, 100, 180, 180], confidence=0.2).detection, obj([120, 120, 200, 200], confidence=0.9)]

    cfg = CascadeConfig(mode=TriggerMode.CURRENT, detector_conf_threshold=0.5)
    (event,) = run_offline([FramePacket(0)], ListRecognizer({0: 1.0}), LowConfidenceDetector(), cfg, GEOM)
    assert event.hands == ()
    assert event.contact_state == ContactState.NO_CONTACT
