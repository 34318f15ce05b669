"""活动物体关联

在保留的手与所有物体之间枚举 (手, 物体) 对，选出 IoU 最大的一对；
只有最大 IoU 严格大于阈值时才输出，每帧至多一个活动物体。
"""

from dataclasses import dataclass
from typing import Iterable, List, Optional

from app.services.hoi.geometry import Detection, HandInstance, iou


@dataclass(frozen=True)
class AssociationConfig:
    iou_threshold: float = 0.01
    max_hands: int = 2

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold 超出[0,1]: {self.iou_threshold}")
        if self.max_hands < 1:
            raise ValueError(f"max_hands 必须 >= 1: {self.max_hands}")


@dataclass(frozen=True)
class ActiveObjectResult:
    object: Detection
    matched_hand: HandInstance
    iou: float


def _pair_key(pair: ActiveObjectResult):
    # IoU 大者优先，其次物体置信度高、手置信度高、物体 x_min 小
    return (
        -pair.iou,
        -pair.object.confidence,
        -pair.matched_hand.confidence,
        pair.object.bbox.x_min,
        pair.object.bbox.y_min,
        pair.matched_hand.bbox.x_min,
    )


def best_pair(hands: Iterable[HandInstance], objects: Iterable[Detection]) -> Optional[ActiveObjectResult]:
    """不考虑阈值的最优 (手, 物体) 对；没有正重叠时返回 None"""
    objects = [o for o in objects if not o.is_hand]
    candidates: List[ActiveObjectResult] = []
    for hand in hands:
        for obj in objects:
            value = iou(hand.bbox, obj.bbox)
            if value > 0.0:
                candidates.append(ActiveObjectResult(object=obj, matched_hand=hand, iou=value))
    if not candidates:
        return None
    return min(candidates, key=_pair_key)


def select_active_object(
    hands: List[HandInstance],
    objects: List[Detection],
    cfg: AssociationConfig,
) -> Optional[ActiveObjectResult]:
    """选择活动物体

    hands 应已经过 top_hands 过滤；超过 max_hands 的部分按置信度截断。
    """
    if not hands:
        return None
    if len(hands) > cfg.max_hands:
        hands = sorted(hands, key=lambda h: (-h.confidence, h.bbox.x_min, h.bbox.y_min))[: cfg.max_hands]
    pair = best_pair(hands, objects)
    if pair is None or pair.iou <= cfg.iou_threshold:
        return None
    return pair
