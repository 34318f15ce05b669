"""评估指标

- pr_ap: 全点插值 AP（单调包络下的面积），p-AP 与 HOI AP 共用
- point_match / p_ap: 点级 AP，按置信度贪心匹配最近的真值帧
- hoi_ap: AP Hand / +State / +Side / +All 四项指标
- detection_metrics: 检测器 AP / Recall / HM
- downsample_indices: 保留正样本帧的降帧采样
"""

import math
from bisect import bisect_left
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from app.services.hoi.cascade import ContactState, InteractionEvent
from app.services.hoi.geometry import BBox, Detection, Side, iou
from app.utils.exceptions import EvaluationError


class Outcome(str, Enum):
    TP = "tp"
    FP = "fp"


@dataclass(frozen=True)
class PointPrediction:
    frame_index: int
    confidence: float
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"置信度超出[0,1]: {self.confidence}")


@dataclass(frozen=True)
class MatchRecord:
    prediction_index: int
    outcome: Outcome
    confidence: float
    gt_index: Optional[int] = None


def _is_tp(outcome: Union[Outcome, bool, str]) -> bool:
    if isinstance(outcome, Outcome):
        return outcome == Outcome.TP
    if isinstance(outcome, str):
        return Outcome(outcome) == Outcome.TP
    return bool(outcome)


def pr_ap(records: Sequence[Tuple[float, Union[Outcome, bool]]], n_ground_truth: int) -> float:
    """全点插值 AP

    Args:
        records: (置信度, TP/FP) 列表，按置信度降序排序，同分保持输入顺序
        n_ground_truth: 真值数量

    Returns:
        float: [0,1] 区间的 AP；无真值时，无预测返回1，有预测返回0
    """
    if n_ground_truth < 0:
        raise ValueError(f"n_ground_truth 不能为负: {n_ground_truth}")
    if n_ground_truth == 0:
        return 0.0 if len(records) else 1.0
    if not len(records):
        return 0.0

    confidence = np.asarray([r[0] for r in records], dtype=np.float64)
    tp = np.asarray([1.0 if _is_tp(r[1]) else 0.0 for r in records], dtype=np.float64)
    order = np.argsort(-confidence, kind="stable")
    tp = tp[order]
    fp = 1.0 - tp

    tp = np.cumsum(tp)
    fp = np.cumsum(fp)
    rec = tp / float(n_ground_truth)
    prec = tp / (tp + fp)

    # 两端追加哨兵值
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))

    # 精度单调包络
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]

    # 召回率变化处累加 (Δrecall * precision)
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def _confidence_order(confidences: Sequence[float]) -> List[int]:
    return sorted(range(len(confidences)), key=lambda i: -confidences[i])


def point_match(
    predictions: Sequence[PointPrediction],
    gt_frames: Sequence[int],
    time_threshold: float,
) -> List[MatchRecord]:
    """点级贪心匹配

    按置信度降序遍历预测，每个预测匹配最近的未匹配真值帧，
    距离不超过 time_threshold 为 TP，否则为 FP。等距时匹配较早的真值帧。
    返回的记录按处理顺序排列。
    """
    if time_threshold < 0:
        raise ValueError(f"time_threshold 不能为负: {time_threshold}")
    gt_order = sorted(range(len(gt_frames)), key=lambda i: (gt_frames[i], i))
    frames = [gt_frames[i] for i in gt_order]
    matched = [False] * len(frames)

    records: List[MatchRecord] = []
    for pi in _confidence_order([p.confidence for p in predictions]):
        pred = predictions[pi]
        pos = bisect_left(frames, pred.frame_index)

        left = pos - 1
        while left >= 0 and matched[left]:
            left -= 1
        right = pos
        while right < len(frames) and matched[right]:
            right += 1

        best = None
        if left >= 0:
            best = left
        if right < len(frames):
            if best is None or frames[right] - pred.frame_index < pred.frame_index - frames[best]:
                best = right

        if best is not None and abs(frames[best] - pred.frame_index) <= time_threshold:
            matched[best] = True
            records.append(MatchRecord(pi, Outcome.TP, pred.confidence, gt_order[best]))
        else:
            records.append(MatchRecord(pi, Outcome.FP, pred.confidence))
    return records


@dataclass
class PApReport:
    per_threshold: Dict[int, float]
    mean: float

    def to_dict(self) -> Dict:
        return {"per_threshold": {str(k): v for k, v in self.per_threshold.items()}, "mean": self.mean}


def default_thresholds(fps: float, seconds: Iterable[float] = range(1, 11)) -> List[int]:
    """秒级阈值转换为帧数"""
    return [int(round(s * fps)) for s in seconds]


def _check_thresholds(thresholds: Sequence[float]):
    if not thresholds:
        raise ValueError("时间阈值列表不能为空")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"时间阈值必须升序: {list(thresholds)}")


def p_ap(
    predictions: Sequence[PointPrediction],
    gt_frames: Sequence[int],
    thresholds: Optional[Sequence[int]] = None,
    fps: float = 30.0,
) -> PApReport:
    """单路视频的点级 AP，逐阈值计算并取均值"""
    return p_ap_corpus({None: (predictions, gt_frames)}, thresholds, fps)


def p_ap_corpus(
    per_video: Mapping[Hashable, Tuple[Sequence[PointPrediction], Sequence[int]]],
    thresholds: Optional[Sequence[int]] = None,
    fps: float = 30.0,
) -> PApReport:
    """多路视频的点级 AP：逐视频匹配，汇总记录后统一计算 AP"""
    thresholds = list(thresholds) if thresholds is not None else default_thresholds(fps)
    _check_thresholds(thresholds)
    per_threshold: Dict[int, float] = {}
    for t in thresholds:
        records: List[Tuple[float, Outcome]] = []
        n_gt = 0
        for predictions, gt_frames in per_video.values():
            records.extend((r.confidence, r.outcome) for r in point_match(predictions, gt_frames, t))
            n_gt += len(gt_frames)
        per_threshold[t] = pr_ap(records, n_gt)
    mean = float(sum(per_threshold.values()) / len(per_threshold))
    return PApReport(per_threshold=per_threshold, mean=mean)


@dataclass(frozen=True)
class HandGT:
    bbox: BBox
    side: Side
    state: ContactState


@dataclass(frozen=True)
class ActiveObjectGT:
    bbox: BBox
    class_id: int
    hand_side: Side


@dataclass(frozen=True)
class HoiFrameGT:
    frame_index: int
    hands: Tuple[HandGT, ...]
    active_objects: Tuple[ActiveObjectGT, ...] = ()

    def __post_init__(self):
        sides = {h.side for h in self.hands}
        for obj in self.active_objects:
            if obj.hand_side not in sides:
                raise ValueError(f"帧 {self.frame_index} 的活动物体关联了不存在的手: {obj.hand_side.value}")


@dataclass
class HoiApReport:
    ap_hand: float
    ap_hand_state: float
    ap_hand_side: float
    ap_hand_all: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class HoiMatch:
    """单个预测手的匹配结果"""

    confidence: float
    hand: bool
    state: bool
    side: bool
    all: bool


def _object_matches(pred: Optional[Detection], gt_objects: Sequence[ActiveObjectGT], box_iou_match: float) -> bool:
    if pred is None:
        return False
    return any(
        obj.class_id == pred.class_id and iou(pred.bbox, obj.bbox) >= box_iou_match for obj in gt_objects
    )


def _index_gt(gt: Iterable[HoiFrameGT]) -> Dict[int, HoiFrameGT]:
    index: Dict[int, HoiFrameGT] = {}
    for frame in gt:
        if frame.frame_index in index:
            raise EvaluationError("真值帧重复", frame_index=frame.frame_index)
        index[frame.frame_index] = frame
    return index


def hoi_match(
    pred_events: Sequence[InteractionEvent],
    gt: Sequence[HoiFrameGT],
    box_iou_match: float = 0.5,
) -> Tuple[List[HoiMatch], int]:
    """HOI 预测与真值逐帧贪心匹配

    每只预测手的排序分数为手的检测置信度。匹配只做一次，
    四项指标在同一匹配结果上逐级附加条件，因此满足层级关系。
    """
    index = _index_gt(gt)
    preds = []
    for event in pred_events:
        if event.frame_index not in index:
            raise EvaluationError("预测帧不在真值索引中", frame_index=event.frame_index)
        for hand in event.hands:
            preds.append((event, hand))

    used: Dict[int, Set[int]] = defaultdict(set)
    matches: List[HoiMatch] = []
    for pi in _confidence_order([hand.confidence for _, hand in preds]):
        event, hand = preds[pi]
        frame = index[event.frame_index]
        best, best_iou = None, -1.0
        for gi, gt_hand in enumerate(frame.hands):
            if gi in used[frame.frame_index]:
                continue
            value = iou(hand.bbox, gt_hand.bbox)
            if value > best_iou:
                best, best_iou = gi, value

        if best is None or best_iou < box_iou_match:
            matches.append(HoiMatch(hand.confidence, False, False, False, False))
            continue

        used[frame.frame_index].add(best)
        gt_hand = frame.hands[best]
        state_ok = event.hand_state(hand) == gt_hand.state
        side_ok = hand.side == gt_hand.side
        linked = [o for o in frame.active_objects if o.hand_side == gt_hand.side]
        object_ok = True
        if gt_hand.state == ContactState.CONTACT and linked:
            pred_object = event.active_object if hand == event.matched_hand else None
            object_ok = _object_matches(pred_object, linked, box_iou_match)
        matches.append(HoiMatch(hand.confidence, True, state_ok, side_ok, state_ok and side_ok and object_ok))

    n_gt = sum(len(frame.hands) for frame in index.values())
    return matches, n_gt


def hoi_ap(
    pred_events: Sequence[InteractionEvent],
    gt: Sequence[HoiFrameGT],
    box_iou_match: float = 0.5,
) -> HoiApReport:
    return hoi_ap_corpus({None: (pred_events, gt)}, box_iou_match)


def hoi_ap_corpus(
    per_video: Mapping[Hashable, Tuple[Sequence[InteractionEvent], Sequence[HoiFrameGT]]],
    box_iou_match: float = 0.5,
) -> HoiApReport:
    """多路视频的 HOI AP：帧序号只在视频内唯一，逐视频匹配后汇总"""
    matches: List[HoiMatch] = []
    n_gt = 0
    for pred_events, gt in per_video.values():
        video_matches, video_gt = hoi_match(pred_events, gt, box_iou_match)
        matches.extend(video_matches)
        n_gt += video_gt
    return HoiApReport(
        ap_hand=pr_ap([(m.confidence, m.hand) for m in matches], n_gt),
        ap_hand_state=pr_ap([(m.confidence, m.state) for m in matches], n_gt),
        ap_hand_side=pr_ap([(m.confidence, m.side) for m in matches], n_gt),
        ap_hand_all=pr_ap([(m.confidence, m.all) for m in matches], n_gt),
    )


@dataclass
class DetectionReport:
    ap: float
    recall: float
    hm: float
    per_class_ap: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "ap": self.ap,
            "recall": self.recall,
            "hm": self.hm,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
        }


def detection_metrics(
    predictions: Mapping[Hashable, Sequence[Detection]],
    ground_truth: Mapping[Hashable, Sequence[Tuple[BBox, int]]],
    iou_threshold: float = 0.5,
    conf_threshold: float = 0.7,
) -> DetectionReport:
    """检测器评估：按类别贪心匹配，AP 为各真值类别的平均，HM 为 AP 与召回率的调和平均"""
    gt_by_class: Dict[int, Dict[Hashable, List[BBox]]] = defaultdict(lambda: defaultdict(list))
    for key, boxes in ground_truth.items():
        for bbox, class_id in boxes:
            gt_by_class[class_id][key].append(bbox)

    per_class_ap: Dict[int, float] = {}
    total_tp = 0
    total_gt = 0
    for class_id in sorted(gt_by_class):
        frames = gt_by_class[class_id]
        candidates = [
            (key, det)
            for key, dets in predictions.items()
            for det in dets
            if det.class_id == class_id and det.confidence >= conf_threshold
        ]
        used: Dict[Hashable, Set[int]] = defaultdict(set)
        records = []
        for ci in _confidence_order([det.confidence for _, det in candidates]):
            key, det = candidates[ci]
            best, best_iou = None, -1.0
            for gi, bbox in enumerate(frames.get(key, [])):
                if gi in used[key]:
                    continue
                value = iou(det.bbox, bbox)
                if value > best_iou:
                    best, best_iou = gi, value
            if best is not None and best_iou >= iou_threshold:
                used[key].add(best)
                records.append((det.confidence, True))
            else:
                records.append((det.confidence, False))
        n_gt = sum(len(b) for b in frames.values())
        per_class_ap[class_id] = pr_ap(records, n_gt)
        total_tp += sum(1 for _, ok in records if ok)
        total_gt += n_gt

    ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    recall = total_tp / total_gt if total_gt else 0.0
    hm = 2 * ap * recall / (ap + recall) if ap + recall > 0 else 0.0
    return DetectionReport(ap=ap, recall=recall, hm=hm, per_class_ap=per_class_ap)


def downsample_indices(
    n_frames: int,
    src_fps: float = 30.0,
    dst_fps: float = 4.0,
    positives: Iterable[int] = (),
) -> List[int]:
    """降帧采样并保留所有正样本帧

    取 floor(k * src_fps / dst_fps) 落在 [0, n_frames) 内的帧，并入正样本帧后升序返回。
    """
    if not 0 < dst_fps <= src_fps:
        raise ValueError(f"帧率必须满足 0 < dst_fps <= src_fps: {dst_fps}, {src_fps}")
    positives = set(positives)
    for p in positives:
        if not 0 <= p < n_frames:
            raise ValueError(f"正样本帧超出范围: {p}")
    kept = set()
    k = 0
    while True:
        idx = math.floor(k * src_fps / dst_fps)
        if idx >= n_frames:
            break
        kept.add(idx)
        k += 1
    return sorted(kept | positives)
