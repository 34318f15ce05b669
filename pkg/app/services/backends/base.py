"""推理后端契约

Recognizer: feed(frame_index, image) -> ContactPrediction，每帧恰好一个预测
Detector:   detect(frame_index, image) -> List[Detection]

两类后端都暴露调用计数 calls，级联测试用它验证检测器只在触发帧上被调用。
"""

import time
from abc import ABC, abstractmethod
from collections import deque
from enum import Enum
from typing import List, Union

from app.services.hoi.cascade import ContactPrediction
from app.services.hoi.geometry import Detection
from app.utils.logger import Logger

logger = Logger("hoi-backend")


class BackendRole(str, Enum):
    RECOGNIZER = "recognizer"
    DETECTOR = "detector"


class LatencyClass(str, Enum):
    """后端声明的延迟等级"""

    INSTANT = "instant"  # 查表类后端
    RECOGNIZER = "recognizer"  # 约 7ms/帧 的在线识别模型
    DETECTOR = "detector"  # 约 37ms/帧 的目标检测模型
    REMOTE = "remote"  # 外部进程，取决于对端


class Recognizer(ABC):
    role = BackendRole.RECOGNIZER
    latency_class = LatencyClass.INSTANT

    def __init__(self):
        self.calls = 0

    def feed(self, frame_index: int, image: bytes = b"") -> ContactPrediction:
        self.calls += 1
        return self._predict(frame_index, image)

    @abstractmethod
    def _predict(self, frame_index: int, image: bytes) -> ContactPrediction:
        pass

    def close(self):
        pass


class Detector(ABC):
    role = BackendRole.DETECTOR
    latency_class = LatencyClass.INSTANT

    def __init__(self):
        self.calls = 0

    def detect(self, frame_index: int, image: bytes = b"") -> List[Detection]:
        self.calls += 1
        return self._detect(frame_index, image)

    @abstractmethod
    def _detect(self, frame_index: int, image: bytes) -> List[Detection]:
        pass

    def close(self):
        pass


Backend = Union[Recognizer, Detector]


class BackendWrapper:
    """包装器基类，透传 feed/detect 与调用计数"""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.role = inner.role
        self.latency_class = inner.latency_class

    @property
    def calls(self) -> int:
        return self.inner.calls

    def _invoke(self, method: str, frame_index: int, image: bytes):
        return getattr(self.inner, method)(frame_index, image)

    def feed(self, frame_index: int, image: bytes = b""):
        return self._invoke("feed", frame_index, image)

    def detect(self, frame_index: int, image: bytes = b""):
        return self._invoke("detect", frame_index, image)

    def close(self):
        self.inner.close()


class TimedBackend(BackendWrapper):
    """记录每次调用耗时，并以 debug 级别写日志"""

    def __init__(self, inner: Backend, history_size: int = 4096):
        super().__init__(inner)
        self.latencies: deque = deque(maxlen=history_size)

    def _invoke(self, method: str, frame_index: int, image: bytes):
        start = time.perf_counter()
        try:
            return super()._invoke(method, frame_index, image)
        finally:
            elapsed = time.perf_counter() - start
            self.latencies.append(elapsed)
            logger.log_backend_call(self.role.value, self.latency_class.value, frame_index, elapsed)

    @property
    def mean_latency_ms(self) -> float:
        if not self.latencies:
            return 0.0
        return sum(self.latencies) / len(self.latencies) * 1000.0


class DelayedBackend(BackendWrapper):
    """人工延迟，用于吞吐测试"""

    def __init__(self, inner: Backend, delay_ms: float):
        if delay_ms < 0:
            raise ValueError(f"delay_ms 不能为负: {delay_ms}")
        super().__init__(inner)
        self.delay_s = delay_ms / 1000.0

    def _invoke(self, method: str, frame_index: int, image: bytes):
        if self.delay_s > 0:
            time.sleep(self.delay_s)
        return super()._invoke(method, frame_index, image)
