"""服务端流式处理管线

线程划分：
    HTTP 接收（调用 ingest）   校验批次，放入接收队列；接收队列满时阻塞，形成背压
    拆包线程                   把批次拆成单帧，复制到模型队列和可视化队列
    模型工作线程               按最多 group_size 帧一组取帧，逐帧送入级联，生成反馈记录
    可视化线程                 见 visual_tap，可视化队列满时丢弃最旧帧
    会话清理线程               可选，关闭空闲超时的会话

模型队列从不丢帧；每个会话的级联状态只由模型工作线程读写。
关闭会话的标记随帧一起排队，模型工作线程处理完该会话已接收的帧后再关闭后端、释放记录。
"""

import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from app.services.hoi.cascade import CascadeConfig, CascadeRunner, FramePacket
from app.services.hoi.geometry import ImageGeometry
from app.services.stream.performance import StageTimer
from app.services.stream.visual_tap import STOP as _STOP
from app.services.stream.visual_tap import VisualTap
from app.utils.exceptions import (
    BatchOrderError,
    BatchTooLargeError,
    ContractViolationError,
    HoiError,
    InvalidCursorError,
    SessionNotFoundError,
)
from app.utils.logger import Logger

logger = Logger("hoi-stream")


@dataclass(frozen=True)
class QueueConfig:
    max_batch_frames: int = 60
    group_size: int = 30
    linger_s: float = 0.1
    ingest_capacity: int = 4
    model_capacity: int = 120
    vis_capacity: int = 30
    # 会话空闲超过该秒数后自动关闭，0 表示不过期
    session_idle_s: float = 0.0

    def __post_init__(self):
        for name in ("max_batch_frames", "group_size", "ingest_capacity", "model_capacity", "vis_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} 必须 >= 1")
        if self.linger_s < 0:
            raise ValueError("linger_s 不能为负")
        if self.session_idle_s < 0:
            raise ValueError("session_idle_s 不能为负")


class DropOldestQueue(queue.Queue):
    """满时丢弃最旧元素的队列，put 永不阻塞"""

    def __init__(self, maxsize: int):
        super().__init__(maxsize=maxsize)
        self.dropped = 0

    def put_latest(self, item):
        while True:
            try:
                self.put_nowait(item)
                return
            except queue.Full:
                try:
                    self.get_nowait()
                    self.dropped += 1
                except queue.Empty:
                    pass


@dataclass
class IncomingFrame:
    session_id: str
    frame_index: int
    timestamp: float
    image: bytes
    received_at: float
    enqueued_at: float = 0.0


@dataclass
class IncomingBatch:
    session_id: str
    batch_index: int
    frames: List[IncomingFrame]


@dataclass
class SessionClose:
    """会话关闭标记，排在该会话已接收的帧之后"""

    session_id: str


@dataclass
class SessionState:
    session_id: str
    video_id: str
    fps: float
    geometry: ImageGeometry
    runner: CascadeRunner
    created_at: float = field(default_factory=time.time)
    last_active: float = field(default_factory=time.monotonic)
    closed: bool = False
    last_batch_index: int = -1
    last_frame_index: int = -1
    frames_accepted: int = 0
    frames_processed: int = 0
    records: List[Dict[str, Any]] = field(default_factory=list)
    ack_cursor: int = 0
    degraded: Optional[str] = None
    latest_event: Optional[Dict[str, Any]] = None
    # 同一会话的批次串行接收
    ingest_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    # 保护 records / frames_processed / latest_event
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def info(self) -> Dict[str, Any]:
        return {
            "session_id": self.session_id,
            "video_id": self.video_id,
            "fps": self.fps,
            "width": self.geometry.width,
            "height": self.geometry.height,
        }


# (video_id) -> (recognizer, detector, fps, geometry)
BackendFactory = Callable[[str], Tuple[Any, Any, float, ImageGeometry]]


class StreamService:
    """流式处理服务，持有全部会话和队列"""

    def __init__(
        self,
        backend_factory: BackendFactory,
        cascade_cfg: CascadeConfig,
        queue_cfg: Optional[QueueConfig] = None,
        tap: Optional[VisualTap] = None,
    ):
        self.backend_factory = backend_factory
        self.cascade_cfg = cascade_cfg
        self.queue_cfg = queue_cfg or QueueConfig()
        self.tap = tap or VisualTap(None)
        self.timer = StageTimer()

        self.sessions: Dict[str, SessionState] = {}
        self.sessions_lock = threading.Lock()

        self.ingest_queue: queue.Queue = queue.Queue(maxsize=self.queue_cfg.ingest_capacity)
        self.model_queue: queue.Queue = queue.Queue(maxsize=self.queue_cfg.model_capacity)
        self.vis_queue = DropOldestQueue(self.queue_cfg.vis_capacity)

        self._threads: List[threading.Thread] = []
        self._janitor_stop = threading.Event()
        self.running = False
        self.closing = False

    # ---------------------------------------------------------------- 生命周期

    def start(self):
        if self.running:
            return
        self.running = True
        self.closing = False
        self._janitor_stop.clear()
        self._threads = [
            threading.Thread(target=self._unpacker, name="hoi-unpacker", daemon=True),
            threading.Thread(target=self._model_worker, name="hoi-model-worker", daemon=True),
            threading.Thread(target=self.tap.run, args=(self.vis_queue, self.sessions), name="hoi-tap", daemon=True),
        ]
        if self.queue_cfg.session_idle_s > 0:
            self._threads.append(threading.Thread(target=self._janitor, name="hoi-session-janitor", daemon=True))
        for t in self._threads:
            t.start()
        logger.info("流式管线已启动", {"queues": self.queue_cfg.__dict__})

    def shutdown(self, timeout: float = 30.0):
        """先排空模型队列，再关闭可视化线程"""
        if not self.running:
            return
        self.closing = True
        self._janitor_stop.set()
        unpacker, worker, tap = self._threads[:3]
        for janitor in self._threads[3:]:
            janitor.join(timeout)
        self.ingest_queue.put(_STOP)
        unpacker.join(timeout)
        worker.join(timeout)
        self.vis_queue.put_latest(_STOP)
        tap.join(timeout)
        self.tap.close()
        with self.sessions_lock:
            sessions = list(self.sessions.values())
        for session in sessions:
            self._close_backends(session)
        self.running = False
        self.timer.report("流式管线性能统计")

    def _close_backends(self, session: SessionState):
        for backend in (session.runner.recognizer, session.runner.detector):
            if backend is not None:
                try:
                    backend.close()
                except Exception as e:
                    logger.warning("关闭后端失败", {"session_id": session.session_id, "error": str(e)})

    # ---------------------------------------------------------------- 会话

    def create_session(
        self,
        video_id: str,
        fps: Optional[float] = None,
        width: Optional[int] = None,
        height: Optional[int] = None,
    ) -> Dict[str, Any]:
        """创建会话，fps 和画面尺寸以服务端语料为准"""
        if self.closing:
            raise ContractViolationError("服务正在关闭")
        recognizer, detector, server_fps, geometry = self.backend_factory(video_id)
        if (fps is not None and fps != server_fps) or (
            width is not None and (width, height) != (geometry.width, geometry.height)
        ):
            logger.warning(
                "客户端参数与语料不一致，以服务端为准",
                {"video_id": video_id, "client": [fps, width, height], "server": [server_fps, geometry.width, geometry.height]},
            )
        runner = CascadeRunner(recognizer, detector, geometry, self.cascade_cfg, timer=self.timer)
        session = SessionState(
            session_id=uuid.uuid4().hex,
            video_id=video_id,
            fps=server_fps,
            geometry=geometry,
            runner=runner,
        )
        with self.sessions_lock:
            self.sessions[session.session_id] = session
        logger.info("会话已创建", session.info())
        return session.info()

    def get_session(self, session_id: str) -> SessionState:
        with self.sessions_lock:
            session = self.sessions.get(session_id)
        if session is None or session.closed:
            raise SessionNotFoundError("会话不存在", session_id=session_id)
        return session

    def close_session(self, session_id: str) -> Dict[str, Any]:
        """关闭会话

        会话立即对外不可见；已接收的帧仍按序处理完，之后由模型工作线程关闭后端并释放记录。
        """
        session = self.get_session(session_id)
        if self.closing:
            raise ContractViolationError("服务正在关闭", session_id=session_id)
        with session.ingest_lock:
            if session.closed:
                raise SessionNotFoundError("会话不存在", session_id=session_id)
            session.closed = True
            if self.running:
                # 与帧走同一条队列，保证排在已接收的帧之后
                self.ingest_queue.put(SessionClose(session_id))
        if not self.running:
            self._release(session_id)
        logger.info("会话已关闭", {"session_id": session_id, "frames_accepted": session.frames_accepted})
        return {"session_id": session_id, "frames_accepted": session.frames_accepted}

    def expire_idle(self, now: Optional[float] = None) -> List[str]:
        """关闭空闲超时的会话，返回被关闭的会话ID"""
        idle_s = self.queue_cfg.session_idle_s
        if idle_s <= 0:
            return []
        now = time.monotonic() if now is None else now
        with self.sessions_lock:
            idle = [s.session_id for s in self.sessions.values() if not s.closed and now - s.last_active > idle_s]
        expired = []
        for session_id in idle:
            try:
                self.close_session(session_id)
            except (SessionNotFoundError, ContractViolationError):
                continue
            expired.append(session_id)
        if expired:
            logger.info("空闲会话已过期", {"sessions": expired, "idle_s": idle_s})
        return expired

    def _release(self, session_id: str):
        with self.sessions_lock:
            session = self.sessions.pop(session_id, None)
        if session is not None:
            self._close_backends(session)
            logger.debug("会话资源已释放", {"session_id": session_id, "records": len(session.records)})

    def _janitor(self):
        interval = min(self.queue_cfg.session_idle_s / 4.0, 5.0)
        while not self._janitor_stop.wait(interval):
            self.expire_idle()

    # ---------------------------------------------------------------- 接收

    def ingest(self, session_id: str, batch_index: int, frames: Sequence[Tuple[int, float, bytes]]) -> Dict[str, Any]:
        """接收一个批次

        校验通过后才改变会话状态，被拒绝的批次不留下任何影响。
        返回的反馈在入队之前截取，因此首个批次的确认不含反馈。
        """
        session = self.get_session(session_id)
        if self.closing:
            raise ContractViolationError("服务正在关闭", session_id=session_id)
        if len(frames) > self.queue_cfg.max_batch_frames:
            raise BatchTooLargeError(
                "批次帧数超过上限", session_id=session_id, frames=len(frames), limit=self.queue_cfg.max_batch_frames
            )

        received_at = time.monotonic()
        with session.ingest_lock:
            if session.closed:
                raise SessionNotFoundError("会话不存在", session_id=session_id)
            if batch_index != session.last_batch_index + 1:
                raise BatchOrderError(
                    "批次序号不连续", session_id=session_id, batch_index=batch_index, expected=session.last_batch_index + 1
                )
            previous = session.last_frame_index
            for frame_index, _, _ in frames:
                if frame_index <= previous:
                    raise BatchOrderError(
                        "帧序号必须严格递增", session_id=session_id, frame_index=frame_index, previous=previous
                    )
                previous = frame_index

            with session.lock:
                feedback = session.records[session.ack_cursor:]
                session.ack_cursor = len(session.records)

            batch = IncomingBatch(
                session_id=session_id,
                batch_index=batch_index,
                frames=[IncomingFrame(session_id, f, ts, img, received_at) for f, ts, img in frames],
            )
            # 队列满时阻塞，HTTP 响应随之延后
            self.ingest_queue.put(batch)
            session.last_batch_index = batch_index
            session.last_frame_index = previous
            session.frames_accepted += len(frames)
            session.last_active = time.monotonic()

        return {
            "session_id": session_id,
            "batch_index": batch_index,
            "accepted": len(frames),
            "feedback": feedback,
        }

    def poll(self, session_id: str, cursor: int = 0) -> Dict[str, Any]:
        session = self.get_session(session_id)
        session.last_active = time.monotonic()
        with session.lock:
            if not 0 <= cursor <= len(session.records):
                raise InvalidCursorError("游标超出范围", session_id=session_id, cursor=cursor, size=len(session.records))
            return {
                "session_id": session_id,
                "records": session.records[cursor:],
                "next_cursor": len(session.records),
                "frames_accepted": session.frames_accepted,
                "frames_processed": session.frames_processed,
                "degraded": session.degraded,
            }

    # ---------------------------------------------------------------- 工作线程

    def _unpacker(self):
        """把批次拆成单帧并复制到两个队列"""
        while True:
            batch = self.ingest_queue.get()
            if batch is _STOP:
                self.model_queue.put(_STOP)
                return
            if isinstance(batch, SessionClose):
                self.model_queue.put(batch)
                continue
            for frame in batch.frames:
                frame.enqueued_at = time.monotonic()
                self.model_queue.put(frame)
                self.vis_queue.put_latest(frame)

    def _next_group(self) -> Tuple[List[Any], bool]:
        """取一组帧（可能夹带会话关闭标记）；不满一组时最多等待 linger_s"""
        first = self.model_queue.get()
        if first is _STOP:
            return [], True
        group = [first]
        deadline = time.monotonic() + self.queue_cfg.linger_s
        while len(group) < self.queue_cfg.group_size:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                item = self.model_queue.get(timeout=remaining)
            except queue.Empty:
                break
            if item is _STOP:
                return group, True
            group.append(item)
        return group, False

    def _model_worker(self):
        while True:
            group, stop = self._next_group()
            for item in group:
                if isinstance(item, SessionClose):
                    self._release(item.session_id)
                else:
                    self._process(item)
            if stop:
                return

    def _process(self, frame: IncomingFrame):
        started = time.monotonic()
        with self.sessions_lock:
            session = self.sessions.get(frame.session_id)
        if session is None:
            logger.warning("帧所属会话已不存在，丢弃", {"session_id": frame.session_id, "frame_index": frame.frame_index})
            return
        events: List[Dict[str, Any]] = []
        error = None
        inference = 0.0
        if session.degraded is None:
            try:
                event = session.runner.process(FramePacket(frame.frame_index, frame.timestamp, frame.image))
                if event is not None:
                    events.append(event.to_dict())
                inference = session.runner.last_timing.inference
            except HoiError as e:
                session.degraded = str(e)
                logger.error("后端失败，会话降级", {"session_id": session.session_id, "error": str(e)})
            except Exception as e:
                # 非业务异常同样只降级该会话
                session.degraded = f"{type(e).__name__}: {e}"
                logger.error(
                    "帧处理异常，会话降级",
                    {"session_id": session.session_id, "frame_index": frame.frame_index, "error": session.degraded},
                )
        if session.degraded is not None:
            error = session.degraded

        done = time.monotonic()
        timings = {
            "ingest_ms": frame.enqueued_at - frame.received_at,
            "queue_wait_ms": started - frame.enqueued_at,
            "inference_ms": inference,
            "total_ms": done - frame.received_at,
        }
        record = {
            "session_id": session.session_id,
            "frame_index": frame.frame_index,
            "events": events,
            "timing": {k: round(v * 1000.0, 3) for k, v in timings.items()},
            "error": error,
        }
        with session.lock:
            session.records.append(record)
            session.frames_processed += 1
            session.last_active = done
            if events:
                session.latest_event = events[-1]
        self.timer.record("pipeline_overhead", max(0.0, (done - started) - inference))
        self.timer.record_frame_processed()
        logger.log_frame(session.session_id, frame.frame_index, timings)
