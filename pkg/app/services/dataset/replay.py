"""帧回放

replay 以 fps*speed 的节奏回放语料中的一路视频，代替头显的实时采集；
ReplayClient 对应设备端的两个线程：线程1把帧打包成批放入队列，
线程2取出批次通过 HTTP 发送给服务端，并收集服务端回传的事件。
"""

import json
import math
import queue
import threading
import time
from pathlib import Path
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional

import httpx

from app.services.dataset.corpus import Corpus
from app.services.hoi.cascade import FramePacket
from app.utils.exceptions import CorpusError, HoiError
from app.utils.logger import Logger

logger = Logger("hoi-replay")


def replay(corpus: Corpus, video_id: str, speed: float = 1.0) -> Iterator[FramePacket]:
    """按帧率回放一路视频

    speed=inf 时不做节奏控制，按消费速度输出（离线评估用）。
    时间戳由 frame_index / fps 合成。
    """
    entry = corpus.video(video_id)
    if speed <= 0:
        raise ValueError(f"speed 必须为正: {speed}")
    paced = math.isfinite(speed)
    interval = 1.0 / (entry.fps * speed) if paced else 0.0
    start = time.monotonic()

    for f in range(entry.n_frames):
        image = b""
        if entry.frame_pattern is not None:
            path = (corpus.root or Path(".")) / entry.frame_pattern.format(f)
            if not path.is_file():
                raise CorpusError("帧文件不存在", video_id=video_id, frame_index=f, file=str(path))
            image = path.read_bytes()
        if paced:
            delay = start + f * interval - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        yield FramePacket(frame_index=f, timestamp=f / entry.fps, image=image)


@dataclass
class ReplayResult:
    session_id: str
    frames_sent: int
    batches_sent: int
    events: List[Dict[str, Any]] = field(default_factory=list)
    records: List[Dict[str, Any]] = field(default_factory=list)
    elapsed_s: float = 0.0


_DONE = object()


class ReplayClient:
    """回放客户端

    Args:
        endpoint: 服务地址，如 http://127.0.0.1:8000
        client: 可直接传入 httpx.Client（测试时传入 TestClient）
        batch_frames: 每批帧数
        queue_size: 打包线程与发送线程之间的队列容量
    """

    def __init__(
        self,
        endpoint: Optional[str] = None,
        client: Optional[httpx.Client] = None,
        batch_frames: int = 60,
        queue_size: int = 2,
        timeout: float = 30.0,
    ):
        if client is None and endpoint is None:
            raise ValueError("需要 endpoint 或 client")
        self.client = client or httpx.Client(base_url=endpoint, timeout=timeout)
        self.batch_frames = batch_frames
        self.queue_size = queue_size

    def _check(self, response: httpx.Response) -> Dict[str, Any]:
        body = response.json()
        if response.status_code != 200 or body.get("code") != 200:
            raise HoiError(
                f"服务端返回错误: {body.get('message')}",
                status_code=response.status_code,
                code=body.get("code"),
            )
        return body["data"]

    def open_session(self, video_id: str, fps: float, width: int, height: int) -> Dict[str, Any]:
        response = self.client.post(
            "/session", json={"video_id": video_id, "fps": fps, "width": width, "height": height}
        )
        return self._check(response)

    def send_batch(self, session_id: str, batch_index: int, frames: List[FramePacket]) -> Dict[str, Any]:
        metadata = {
            "session_id": session_id,
            "batch_index": batch_index,
            "frames": [
                {"frame_index": f.frame_index, "timestamp": f.timestamp, "part": f"frame_{i}"}
                for i, f in enumerate(frames)
            ],
        }
        files = [("metadata", (None, json.dumps(metadata), "application/json"))]
        files.extend(
            (f"frame_{i}", (f"{f.frame_index:06d}.jpg", f.image, "image/jpeg")) for i, f in enumerate(frames)
        )
        return self._check(self.client.post("/batch", files=files))

    def poll_events(self, session_id: str, cursor: int = 0) -> Dict[str, Any]:
        return self._check(self.client.get("/events", params={"session": session_id, "cursor": cursor}))

    def close_session(self, session_id: str) -> Dict[str, Any]:
        return self._check(self.client.delete(f"/session/{session_id}"))

    @staticmethod
    def _offer(out: queue.Queue, item: Any, stop: threading.Event) -> bool:
        """放入队列；发送线程已退出时放弃"""
        while not stop.is_set():
            try:
                out.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _batcher(
        self, frames: Iterator[FramePacket], out: queue.Queue, errors: List[BaseException], stop: threading.Event
    ):
        """线程1：按批打包"""
        batch: List[FramePacket] = []
        try:
            for frame in frames:
                if stop.is_set():
                    return
                batch.append(frame)
                if len(batch) == self.batch_frames:
                    if not self._offer(out, batch, stop):
                        return
                    batch = []
            if batch:
                self._offer(out, batch, stop)
        except BaseException as e:  # 回放异常交给发送线程抛出
            errors.append(e)
        finally:
            self._offer(out, _DONE, stop)

    def stream(
        self,
        corpus: Corpus,
        video_id: str,
        speed: float = 1.0,
        drain_timeout: float = 30.0,
        close: bool = True,
    ) -> ReplayResult:
        """回放一路视频并收集全部反馈，结束后默认关闭会话"""
        entry = corpus.video(video_id)
        session = self.open_session(video_id, entry.fps, entry.width, entry.height)
        session_id = session["session_id"]
        result = ReplayResult(session_id=session_id, frames_sent=0, batches_sent=0)

        batches: queue.Queue = queue.Queue(maxsize=self.queue_size)
        errors: List[BaseException] = []
        stop = threading.Event()
        producer = threading.Thread(
            target=self._batcher,
            args=(replay(corpus, video_id, speed), batches, errors, stop),
            name="replay-batcher",
            daemon=True,
        )
        start = time.monotonic()
        producer.start()

        # 线程2：发送批次，收集捎带返回的反馈
        try:
            while True:
                batch = batches.get()
                if batch is _DONE:
                    break
                ack = self.send_batch(session_id, result.batches_sent, batch)
                result.batches_sent += 1
                result.frames_sent += len(batch)
                result.records.extend(ack["feedback"])
        finally:
            # 发送失败时让打包线程退出
            stop.set()
            producer.join(drain_timeout)
        if errors:
            raise errors[0]

        # 等待服务端处理完剩余帧
        cursor = len(result.records)
        deadline = time.monotonic() + drain_timeout
        while True:
            data = self.poll_events(session_id, cursor)
            result.records.extend(data["records"])
            cursor = data["next_cursor"]
            if data["frames_processed"] >= result.frames_sent:
                break
            if time.monotonic() > deadline:
                raise HoiError("等待服务端反馈超时", session_id=session_id)
            time.sleep(0.02)

        result.elapsed_s = time.monotonic() - start
        for record in result.records:
            result.events.extend(record["events"])
        if close:
            self.close_session(session_id)
        logger.info(
            "回放完成",
            {
                "session_id": session_id,
                "frames": result.frames_sent,
                "batches": result.batches_sent,
                "events": len(result.events),
                "elapsed_s": round(result.elapsed_s, 3),
            },
        )
        return result
