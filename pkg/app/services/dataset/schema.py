"""语料标注格式

目录结构：
    manifest.json                清单（schema_version、类别表、视频列表）
    annotations/<video_id>.jsonl 每个视频一个文件，首行为文件头，其后每行一帧
    frames/<video_id>/...        可选的帧图像，按 frame_pattern 引用
"""

from typing import List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from app.services.hoi.cascade import ContactState
from app.services.hoi.geometry import BBox, Side

SCHEMA_VERSION = 1


class BoxModel(BaseModel):
    bbox: List[float] = Field(..., min_length=4, max_length=4, description="x_min, y_min, x_max, y_max")

    @field_validator("bbox")
    @classmethod
    def _valid_box(cls, value: List[float]) -> List[float]:
        BBox.from_list(value)
        return value

    def to_bbox(self) -> BBox:
        return BBox.from_list(self.bbox)


class HandRecord(BoxModel):
    side: Side = Field(..., description="左右手")
    state: ContactState = Field(..., description="接触状态")


class ObjectRecord(BoxModel):
    class_id: int = Field(..., ge=1, description="类别索引，0 保留给手")
    hand_side: Optional[Side] = Field(None, description="关联的手（仅活动物体）")


class FrameAnnotation(BaseModel):
    """单帧标注"""

    video_id: str = Field(..., description="视频ID")
    frame_index: int = Field(..., ge=0, description="帧序号")
    hands: List[HandRecord] = Field(default_factory=list, max_length=2)
    active_objects: List[ObjectRecord] = Field(default_factory=list)
    objects: List[ObjectRecord] = Field(default_factory=list, description="可见的非活动物体")
    contact_point: bool = Field(False, description="接触发生的单帧")

    @model_validator(mode="after")
    def _check_links(self):
        sides = {h.side for h in self.hands}
        for obj in self.active_objects:
            if obj.hand_side is None or obj.hand_side not in sides:
                raise ValueError(f"帧 {self.frame_index} 的活动物体关联了不存在的手")
        if self.contact_point and not any(h.state == ContactState.CONTACT for h in self.hands):
            raise ValueError(f"帧 {self.frame_index} 标记为接触点但没有接触状态的手")
        return self


class AnnotationHeader(BaseModel):
    schema_version: int = Field(SCHEMA_VERSION)
    video_id: str


class VideoEntry(BaseModel):
    video_id: str = Field(..., min_length=1)
    n_frames: int = Field(..., gt=0)
    fps: float = Field(..., gt=0)
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    annotations: str = Field(..., description="相对语料根目录的标注文件路径")
    frame_pattern: Optional[str] = Field(None, description="帧文件模板，如 frames/v000/{:06d}.jpg；为空表示仅标注模式")


class CorpusManifest(BaseModel):
    schema_version: int = Field(SCHEMA_VERSION)
    taxonomy: List[str] = Field(..., min_length=1, description="类别表，索引0为手")
    videos: List[VideoEntry] = Field(...)

    @field_validator("schema_version")
    @classmethod
    def _known_version(cls, value: int) -> int:
        if value != SCHEMA_VERSION:
            raise ValueError(f"不支持的 schema_version: {value}")
        return value

    @model_validator(mode="after")
    def _unique_ids(self):
        ids = [v.video_id for v in self.videos]
        if len(ids) != len(set(ids)):
            raise ValueError("video_id 重复")
        return self
