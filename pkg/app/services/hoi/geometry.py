"""框几何与检测记录

轴对齐像素框、检测结果，以及手部相关规则（按置信度保留前 k 只手、左右手判定）。
面积按连续坐标计算，不使用 +1 像素约定。
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Sequence

HAND_CLASS_ID = 0  # 手部保留类别


class DetectionKind(str, Enum):
    HAND = "hand"
    OBJECT = "object"


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class BBox:
    """轴对齐框，图像坐标系，原点在左上角"""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) and c >= 0 for c in coords):
            raise ValueError(f"框坐标必须为非负有限值: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"框坐标顺序错误: {coords}")

    @property
    def width(self) -> float:
        return max(0.0, self.x_max - self.x_min)

    @property
    def height(self) -> float:
        return max(0.0, self.y_max - self.y_min)

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def centroid_x(self) -> float:
        return (self.x_min + self.x_max) / 2.0

    def as_list(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "BBox":
        if len(coords) != 4:
            raise ValueError(f"框需要4个坐标: {coords}")
        return cls(*(float(c) for c in coords))


@dataclass(frozen=True)
class Detection:
    """检测器输出的一个结果"""

    bbox: BBox
    kind: DetectionKind
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"置信度超出[0,1]: {self.confidence}")
        if self.class_id < 0:
            raise ValueError(f"类别索引不能为负: {self.class_id}")
        if self.kind == DetectionKind.HAND and self.class_id != HAND_CLASS_ID:
            raise ValueError(f"手部检测必须使用保留类别 {HAND_CLASS_ID}")

    @property
    def is_hand(self) -> bool:
        return self.kind == DetectionKind.HAND


@dataclass(frozen=True)
class HandInstance:
    detection: Detection
    side: Side

    @property
    def bbox(self) -> BBox:
        return self.detection.bbox

    @property
    def confidence(self) -> float:
        return self.detection.confidence


@dataclass(frozen=True)
class ImageGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"图像尺寸必须为正: {self.width}x{self.height}")


def iou(a: BBox, b: BBox) -> float:
    """交并比；并集面积为0（两个退化框）时返回0"""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def top_hands(detections: Iterable[Detection], k: int = 2) -> List[Detection]:
    """按置信度降序保留前 k 只手

    置信度相同时按 x_min、y_min 升序。
    """
    if k < 1:
        raise ValueError(f"k 必须 >= 1: {k}")
    hands = [d for d in detections if d.is_hand]
    hands.sort(key=lambda d: (-d.confidence, d.bbox.x_min, d.bbox.y_min))
    return hands[:k]


def hand_side(bbox: BBox, geom: ImageGeometry) -> Side:
    """质心在图像水平中线左侧为左手，中线上及右侧为右手"""
    if bbox.centroid_x < geom.width / 2.0:
        return Side.LEFT
    return Side.RIGHT


def to_hand_instances(detections: Iterable[Detection], geom: ImageGeometry, k: int = 2) -> List[HandInstance]:
    return [HandInstance(detection=d, side=hand_side(d.bbox, geom)) for d in top_hands(detections, k)]
