"""级联控制逻辑

维护最近接触预测的滑动窗口，决定何时调用目标检测，
并按以下规则融合识别结果与检测结果：
    识别=接触 且 有重叠   -> 接触事件，带活动物体
    识别=接触 且 无重叠   -> 非接触事件（OD 否决）
    识别=背景             -> 不调用 OD
"""

import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple

from app.services.hoi.association import ActiveObjectResult, AssociationConfig, select_active_object
from app.services.hoi.geometry import (
    BBox,
    Detection,
    DetectionKind,
    HandInstance,
    ImageGeometry,
    Side,
    to_hand_instances,
)
from app.utils.exceptions import BackendError, ContractViolationError, StreamOrderError
from app.utils.logger import Logger

log = Logger("hoi-cascade")


class ContactLabel(str, Enum):
    CONTACT = "contact"
    BACKGROUND = "background"


class ContactState(str, Enum):
    CONTACT = "contact"
    NO_CONTACT = "no_contact"


class EventSource(str, Enum):
    FUSED = "fused"  # 识别与检测融合
    OD_SUPPRESSED = "od_suppressed"  # 识别为接触但检测无重叠
    OVERLAP = "overlap"  # 基线：仅凭重叠推断接触


class TriggerDecision(str, Enum):
    INVOKE_OD = "invoke_od"
    SKIP = "skip"


class TriggerMode(str, Enum):
    WINDOW = "window"  # 识别结果门控检测
    BASELINE = "baseline"  # 每帧检测，仅凭重叠推断接触
    CURRENT = "current"  # 只看当前帧的识别结果，不设窗口


@dataclass(frozen=True)
class ContactPrediction:
    frame_index: int
    confidence: float
    label: ContactLabel

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"帧序号不能为负: {self.frame_index}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"置信度超出[0,1]: {self.confidence}")

    @classmethod
    def from_confidence(cls, frame_index: int, confidence: float, threshold: float = 0.5) -> "ContactPrediction":
        label = ContactLabel.CONTACT if confidence >= threshold else ContactLabel.BACKGROUND
        return cls(frame_index=frame_index, confidence=confidence, label=label)

    @property
    def is_contact(self) -> bool:
        return self.label == ContactLabel.CONTACT


@dataclass(frozen=True)
class InteractionEvent:
    """流水线输出记录"""

    frame_index: int
    hands: Tuple[HandInstance, ...]
    contact_state: ContactState
    active_object: Optional[Detection]
    source: EventSource
    matched_hand: Optional[HandInstance] = None
    association_iou: Optional[float] = None

    def __post_init__(self):
        if self.active_object is not None and self.contact_state != ContactState.CONTACT:
            raise ContractViolationError("存在活动物体的事件必须是接触状态", frame_index=self.frame_index)
        if len(self.hands) > 2:
            raise ContractViolationError("事件中的手超过2只", frame_index=self.frame_index)

    def hand_state(self, hand: HandInstance) -> ContactState:
        """单只手的预测状态：与活动物体匹配的手为接触，其余为非接触"""
        if self.contact_state == ContactState.CONTACT and self.matched_hand is not None and hand == self.matched_hand:
            return ContactState.CONTACT
        return ContactState.NO_CONTACT

    def to_dict(self) -> Dict[str, Any]:
        matched = None
        if self.matched_hand is not None:
            matched = self.hands.index(self.matched_hand) if self.matched_hand in self.hands else None
        return {
            "frame_index": self.frame_index,
            "contact_state": self.contact_state.value,
            "source": self.source.value,
            "hands": [
                {"bbox": h.bbox.as_list(), "side": h.side.value, "confidence": h.confidence}
                for h in self.hands
            ],
            "active_object": detection_to_dict(self.active_object) if self.active_object else None,
            "matched_hand": matched,
            "association_iou": self.association_iou,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "InteractionEvent":
        hands = tuple(
            HandInstance(
                detection=Detection(
                    bbox=BBox.from_list(h["bbox"]),
                    kind=DetectionKind.HAND,
                    class_id=0,
                    confidence=float(h["confidence"]),
                ),
                side=Side(h["side"]),
            )
            for h in data.get("hands", [])
        )
        obj = data.get("active_object")
        matched = data.get("matched_hand")
        return cls(
            frame_index=int(data["frame_index"]),
            hands=hands,
            contact_state=ContactState(data["contact_state"]),
            active_object=detection_from_dict(obj) if obj else None,
            source=EventSource(data["source"]),
            matched_hand=hands[matched] if matched is not None else None,
            association_iou=data.get("association_iou"),
        )


def detection_to_dict(det: Detection) -> Dict[str, Any]:
    return {
        "bbox": det.bbox.as_list(),
        "kind": det.kind.value,
        "class_id": det.class_id,
        "confidence": det.confidence,
    }


def detection_from_dict(data: Dict[str, Any]) -> Detection:
    return Detection(
        bbox=BBox.from_list(data["bbox"]),
        kind=DetectionKind(data.get("kind", "object")),
        class_id=int(data["class_id"]),
        confidence=float(data["confidence"]),
    )


class TriggerWindow:
    """只看过去的触发窗口

    帧 f 上的接触预测会触发 f..f+window_frames 上的检测，
    即 current - f <= window_frames，window_frames 至少为 1。
    只看当前帧的情形用 TriggerMode.CURRENT，不经过窗口。
    单写者状态，由一个流处理上下文独占。
    """

    def __init__(self, window_frames: int = 60):
        if window_frames < 1:
            raise ValueError(f"window_frames 必须 >= 1: {window_frames}")
        self.window_frames = window_frames
        self.positives: deque = deque()
        self.last_frame: Optional[int] = None

    def push(self, p: ContactPrediction) -> TriggerDecision:
        if self.last_frame is not None and p.frame_index <= self.last_frame:
            raise StreamOrderError(
                "帧序号必须严格递增",
                frame_index=p.frame_index,
                previous=self.last_frame,
            )
        self.last_frame = p.frame_index
        if p.is_contact:
            self.positives.append(p)
        while self.positives and p.frame_index - self.positives[0].frame_index > self.window_frames:
            self.positives.popleft()
        return TriggerDecision.INVOKE_OD if self.positives else TriggerDecision.SKIP

    def trigger_prediction(self, frame_index: int) -> ContactPrediction:
        """窗口触发时交给融合步骤的当前帧接触预测（取窗口内最高置信度）"""
        if not self.positives:
            return ContactPrediction(frame_index=frame_index, confidence=0.0, label=ContactLabel.BACKGROUND)
        confidence = max(p.confidence for p in self.positives)
        return ContactPrediction(frame_index=frame_index, confidence=confidence, label=ContactLabel.CONTACT)


def push_prediction(state: TriggerWindow, p: ContactPrediction) -> TriggerDecision:
    return state.push(p)


def fuse(
    ar: ContactPrediction,
    hands: List[HandInstance],
    association: Optional[ActiveObjectResult],
) -> InteractionEvent:
    """融合识别结果与检测结果，只能在调用过 OD 的帧上使用"""
    if not ar.is_contact:
        raise ContractViolationError("背景帧不应调用目标检测", frame_index=ar.frame_index)
    if association is None:
        return InteractionEvent(
            frame_index=ar.frame_index,
            hands=tuple(hands),
            contact_state=ContactState.NO_CONTACT,
            active_object=None,
            source=EventSource.OD_SUPPRESSED,
        )
    return InteractionEvent(
        frame_index=ar.frame_index,
        hands=tuple(hands),
        contact_state=ContactState.CONTACT,
        active_object=association.object,
        source=EventSource.FUSED,
        matched_hand=association.matched_hand,
        association_iou=association.iou,
    )


def fuse_overlap(
    frame_index: int,
    hands: List[HandInstance],
    association: Optional[ActiveObjectResult],
) -> InteractionEvent:
    """基线融合：接触完全由重叠推断"""
    if association is None:
        return InteractionEvent(
            frame_index=frame_index,
            hands=tuple(hands),
            contact_state=ContactState.NO_CONTACT,
            active_object=None,
            source=EventSource.OVERLAP,
        )
    return InteractionEvent(
        frame_index=frame_index,
        hands=tuple(hands),
        contact_state=ContactState.CONTACT,
        active_object=association.object,
        source=EventSource.OVERLAP,
        matched_hand=association.matched_hand,
        association_iou=association.iou,
    )


@dataclass(frozen=True)
class CascadeConfig:
    window_frames: int = 60
    recognizer_threshold: float = 0.5
    mode: TriggerMode = TriggerMode.WINDOW
    association: AssociationConfig = field(default_factory=AssociationConfig)
    detector_conf_threshold: float = 0.0

    def __post_init__(self):
        if self.mode == TriggerMode.WINDOW and self.window_frames < 1:
            raise ValueError(f"window_frames 必须 >= 1: {self.window_frames}")


@dataclass(frozen=True)
class FramePacket:
    """待处理的一帧；image 为空表示仅标注模式下的时钟节拍"""

    frame_index: int
    timestamp: float = 0.0
    image: bytes = b""


@dataclass
class FrameTiming:
    frame_index: int
    recognize: float = 0.0
    detect: float = 0.0
    associate: float = 0.0

    @property
    def inference(self) -> float:
        return self.recognize + self.detect + self.associate


class CascadeRunner:
    """单路视频流的级联处理器

    持有触发窗口和后端实例，按帧顺序调用；不在多个上下文间共享。
    """

    def __init__(self, recognizer, detector, geometry: ImageGeometry, cfg: CascadeConfig, timer=None):
        if cfg.mode != TriggerMode.BASELINE and recognizer is None:
            raise ContractViolationError("识别门控模式需要接触识别后端", mode=cfg.mode.value)
        self.recognizer = recognizer
        self.detector = detector
        self.geometry = geometry
        self.cfg = cfg
        self.timer = timer
        self.window = TriggerWindow(cfg.window_frames) if cfg.mode == TriggerMode.WINDOW else None
        self.predictions: List[ContactPrediction] = []
        self.invocations = 0
        self.last_timing: Optional[FrameTiming] = None
        self._last_frame: Optional[int] = None

    def _call(self, stage: str, frame_index: int, fn, *args):
        start = time.perf_counter()
        try:
            return fn(*args)
        except BackendError as e:
            if e.frame_index is None:
                e.frame_index = frame_index
                e.context["frame_index"] = frame_index
            raise
        except Exception as e:
            raise BackendError(f"{stage} 后端调用失败: {e}", frame_index=frame_index) from e
        finally:
            elapsed = time.perf_counter() - start
            setattr(self.last_timing, stage, elapsed)
            if self.timer is not None:
                self.timer.record(stage, elapsed)

    def process(self, frame: FramePacket) -> Optional[InteractionEvent]:
        """处理一帧；未调用 OD 的帧返回 None"""
        self.last_timing = FrameTiming(frame_index=frame.frame_index)
        ar = None
        if self.cfg.mode != TriggerMode.BASELINE:
            raw = self._call("recognize", frame.frame_index, self.recognizer.feed, frame.frame_index, frame.image)
            if raw.frame_index != frame.frame_index:
                raise BackendError(
                    "识别结果的帧序号与输入不一致", frame_index=frame.frame_index, returned=raw.frame_index
                )
            # 标签由配置中的阈值决定
            pred = ContactPrediction.from_confidence(raw.frame_index, raw.confidence, self.cfg.recognizer_threshold)
            self.predictions.append(pred)
            if self.window is not None:
                if push_prediction(self.window, pred) == TriggerDecision.SKIP:
                    return None
                ar = self.window.trigger_prediction(frame.frame_index)
            else:
                if self._last_frame is not None and frame.frame_index <= self._last_frame:
                    raise StreamOrderError("帧序号必须严格递增", frame_index=frame.frame_index, previous=self._last_frame)
                self._last_frame = frame.frame_index
                if not pred.is_contact:
                    return None
                ar = pred

        self.invocations += 1
        detections = self._call("detect", frame.frame_index, self.detector.detect, frame.frame_index, frame.image)

        start = time.perf_counter()
        detections = [d for d in detections if d.confidence >= self.cfg.detector_conf_threshold]
        hands = to_hand_instances(detections, self.geometry, self.cfg.association.max_hands)
        objects = [d for d in detections if not d.is_hand]
        association = select_active_object(hands, objects, self.cfg.association)
        if ar is None:
            event = fuse_overlap(frame.frame_index, hands, association)
        else:
            event = fuse(ar, hands, association)
        self.last_timing.associate = time.perf_counter() - start
        if self.timer is not None:
            self.timer.record("associate", self.last_timing.associate)
        return event


def run_offline(
    frames: Iterable[FramePacket],
    recognizer,
    detector,
    cfg: CascadeConfig,
    geometry: ImageGeometry,
    timer=None,
) -> List[InteractionEvent]:
    """离线批量运行级联，每个调用 OD 的帧输出一个事件"""
    runner = CascadeRunner(recognizer, detector, geometry, cfg, timer=timer)
    return run_frames(runner, frames)


def run_frames(runner: CascadeRunner, frames: Iterable[FramePacket]) -> List[InteractionEvent]:
    events: List[InteractionEvent] = []
    for frame in frames:
        event = runner.process(frame)
        if runner.timer is not None:
            runner.timer.record_frame_processed()
        if event is not None:
            events.append(event)
    log.debug("离线级联完成", {"events": len(events), "invocations": runner.invocations})
    return events
