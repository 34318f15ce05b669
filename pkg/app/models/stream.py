from typing import List, Optional

from pydantic import BaseModel, Field


class SessionCreate(BaseModel):
    """创建会话请求"""

    video_id: str = Field(..., min_length=1, description="视频ID")
    fps: Optional[float] = Field(None, gt=0, description="客户端帧率，以服务端为准")
    width: Optional[int] = Field(None, gt=0, description="画面宽度")
    height: Optional[int] = Field(None, gt=0, description="画面高度")


class BatchFrameMeta(BaseModel):
    frame_index: int = Field(..., ge=0, description="帧序号")
    timestamp: float = Field(0.0, description="时间戳（秒）")
    part: str = Field(..., min_length=1, description="对应图像分段的字段名")


class BatchMetadata(BaseModel):
    """POST /batch 的 metadata 分段"""

    session_id: str = Field(..., description="会话ID")
    batch_index: int = Field(..., ge=0, description="批次序号，从0开始连续递增")
    frames: List[BatchFrameMeta] = Field(default_factory=list, description="按帧序号排列的帧描述")


class SessionInfo(BaseModel):
    """会话参数，以服务端语料为准"""

    session_id: str
    video_id: str
    fps: float
    width: int
    height: int


class HealthInfo(BaseModel):
    running: bool = Field(..., description="工作线程是否在运行")
    sessions: int = Field(..., description="会话数量")
    model_queue: int = Field(..., description="模型队列中的帧数")
    vis_dropped: int = Field(..., description="可视化队列累计丢弃的帧数")
