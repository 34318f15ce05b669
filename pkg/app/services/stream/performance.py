"""性能统计模块"""

import os
import time
import threading
from collections import deque
from typing import Dict

import numpy as np
import psutil

from app.utils.logger import Logger

logger = Logger("hoi-performance")


class StageTimer:
    """分阶段计时器，用于跟踪级联各阶段耗时

    每个阶段保留最近 history_size 个样本，汇总时给出均值、分位数和帧率。
    线程安全，模型工作线程和 HTTP 线程可以同时写入。
    """

    def __init__(self, history_size: int = 4096):
        """
        Args:
            history_size: 每个阶段保留的历史样本数
        """
        self.history_size = history_size
        self.process = psutil.Process(os.getpid())
        self.lock = threading.Lock()
        self._clear()

    def _clear(self):
        self.stages: Dict[str, deque] = {}
        self.totals: Dict[str, float] = {}
        self.counts: Dict[str, int] = {}
        self.frames_processed = 0
        self.start_time = time.perf_counter()
        self.peak_memory_mb = 0.0

    def record(self, stage: str, seconds: float):
        """记录一个阶段的单次耗时"""
        with self.lock:
            if stage not in self.stages:
                self.stages[stage] = deque(maxlen=self.history_size)
                self.totals[stage] = 0.0
                self.counts[stage] = 0
            self.stages[stage].append(seconds)
            self.totals[stage] += seconds
            self.counts[stage] += 1

    def record_frame_processed(self, count: int = 1):
        with self.lock:
            self.frames_processed += count
            if self.frames_processed % 300 == 0:
                self._sample_memory()

    def _sample_memory(self):
        current = self.process.memory_info().rss / (1024 * 1024)
        self.peak_memory_mb = max(self.peak_memory_mb, current)

    def summary(self) -> Dict[str, Dict[str, float]]:
        """生成统计摘要（毫秒）"""
        with self.lock:
            self._sample_memory()
            elapsed = time.perf_counter() - self.start_time
            result: Dict[str, Dict[str, float]] = {}
            for stage, samples in self.stages.items():
                arr = np.asarray(samples, dtype=np.float64) * 1000.0
                result[stage] = {
                    "count": float(self.counts[stage]),
                    "mean_ms": float(self.totals[stage] / self.counts[stage] * 1000.0),
                    "p50_ms": float(np.percentile(arr, 50)),
                    "p95_ms": float(np.percentile(arr, 95)),
                    "max_ms": float(arr.max()),
                }
            result["_overall"] = {
                "frames": float(self.frames_processed),
                "elapsed_s": elapsed,
                "fps": self.frames_processed / elapsed if elapsed > 0 else 0.0,
                "memory_peak_mb": self.peak_memory_mb,
            }
            return result

    def report(self, title: str = "性能统计报告"):
        """输出性能报告到日志"""
        stats = self.summary()
        overall = stats.pop("_overall")
        logger.info(title, {k: round(v, 3) for k, v in overall.items()})
        for stage, values in stats.items():
            logger.info(f"- {stage}", {k: round(v, 3) for k, v in values.items()})
