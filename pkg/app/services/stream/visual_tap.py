"""可视化旁路

从可视化队列取帧，叠加该会话最新的交互事件后写入输出目录。
手用绿框、活动物体用蓝框标出；写入失败时关闭旁路，不影响模型路径。
"""

import io
import queue
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from PIL import Image, ImageDraw

from app.utils.logger import Logger

logger = Logger("hoi-tap")

STOP = object()

HAND_COLOR = (40, 200, 80)
OBJECT_COLOR = (40, 120, 255)
SUCCESS_COLOR = (40, 200, 80)
FAILURE_COLOR = (230, 50, 50)


def render_overlay(
    image: bytes,
    size: Tuple[int, int],
    event: Optional[Dict[str, Any]],
    label: str = "",
    border: Optional[Tuple[int, int, int]] = None,
) -> Image.Image:
    """在帧上绘制事件；image 为空时使用灰色画布"""
    if image:
        canvas = Image.open(io.BytesIO(image)).convert("RGB")
    else:
        canvas = Image.new("RGB", size, (60, 60, 60))
    draw = ImageDraw.Draw(canvas)
    if event:
        for i, hand in enumerate(event.get("hands", [])):
            width = 4 if event.get("matched_hand") == i else 2
            draw.rectangle(hand["bbox"], outline=HAND_COLOR, width=width)
            state = event["contact_state"] if event.get("matched_hand") == i else "no_contact"
            draw.text((hand["bbox"][0] + 2, hand["bbox"][1] + 2), f"{hand['side']} {state}", fill=HAND_COLOR)
        obj = event.get("active_object")
        if obj:
            draw.rectangle(obj["bbox"], outline=OBJECT_COLOR, width=3)
            draw.text((obj["bbox"][0] + 2, obj["bbox"][1] + 2), f"cls {obj['class_id']}", fill=OBJECT_COLOR)
    if label:
        draw.text((8, 8), label, fill=(255, 255, 255))
    if border is not None:
        w, h = canvas.size
        draw.rectangle([0, 0, w - 1, h - 1], outline=border, width=6)
    return canvas


class VisualTap:
    """可视化输出；sink_dir 为 None 时只消费队列"""

    def __init__(self, sink_dir: Optional[Union[str, Path]] = None):
        self.sink_dir = Path(sink_dir) if sink_dir else None
        self.enabled = self.sink_dir is not None
        self.written = 0

    def write(self, frame, session) -> None:
        with session.lock:
            event = session.latest_event
        canvas = render_overlay(
            frame.image,
            (session.geometry.width, session.geometry.height),
            event,
            label=f"{session.video_id} #{frame.frame_index}",
        )
        out = self.sink_dir / session.session_id / f"{frame.frame_index:06d}.jpg"
        out.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(out, format="JPEG", quality=80)
        self.written += 1

    def run(self, vis_queue: queue.Queue, sessions: Dict[str, Any]):
        while True:
            frame = vis_queue.get()
            if frame is STOP:
                return
            if not self.enabled:
                continue
            session = sessions.get(frame.session_id)
            if session is None:
                continue
            try:
                self.write(frame, session)
            except (OSError, ValueError) as e:
                self.enabled = False
                logger.warning("可视化输出失败，已关闭旁路", {"sink": str(self.sink_dir), "error": str(e)})

    def close(self):
        logger.info("可视化旁路已关闭", {"sink": str(self.sink_dir), "written": self.written})
