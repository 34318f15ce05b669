"""离线实验驱动

每个配置行 = 触发方式 × 关联 IoU 阈值。触发方式：
    oracle     识别使用标注接触点，只在当前帧触发（性能上界）
    <N>        使用配置的识别后端，过去 N 帧窗口触发
    baseline   每帧调用检测，仅凭重叠推断接触

输出目录：
    results.json   指标，相同配置与种子下字节一致
    timing.json    各阶段耗时（不参与一致性比较）
    events.jsonl   每行一个事件，附行名和视频ID
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator
from tqdm import tqdm

from app.services.backends.base import BackendRole
from app.services.backends.registry import BackendOptions, build_detector, build_recognizer, validate_spec
from app.services.dataset.corpus import Corpus, load_corpus
from app.services.dataset.replay import replay
from app.services.hoi.association import AssociationConfig
from app.services.hoi.cascade import CascadeConfig, CascadeRunner, InteractionEvent, TriggerMode, run_frames
from app.services.hoi.metrics import (
    PointPrediction,
    default_thresholds,
    detection_metrics,
    hoi_ap_corpus,
    p_ap_corpus,
)
from app.services.stream.performance import StageTimer
from app.utils.exceptions import ConfigError, CorpusError, HoiError
from app.utils.logger import Logger

logger = Logger("hoi-harness")

RESULTS_FILE = "results.json"
TIMING_FILE = "timing.json"
EVENTS_FILE = "events.jsonl"


class ExperimentConfig(BaseModel):
    """实验配置，所有随机性来自 seed"""

    corpus: str = Field(..., description="语料目录")
    recognizer: str = Field("scripted", description="窗口触发行使用的识别后端")
    detector: str = Field("scripted", description="检测后端")
    triggers: List[str] = Field(["oracle", "60", "30"], min_length=1, description="oracle | baseline | 窗口帧数")
    iou_thresholds: List[float] = Field([0.01], min_length=1, description="关联 IoU 阈值列表，升序")
    pap_thresholds_s: List[float] = Field([float(s) for s in range(1, 11)], min_length=1)
    recognizer_threshold: float = Field(0.5, ge=0, le=1)
    detector_conf_threshold: float = Field(0.0, ge=0, le=1)
    hoi_box_iou: float = Field(0.5, gt=0, le=1)
    max_hands: int = Field(2, ge=1)
    od_conf_threshold: float = Field(0.7, ge=0, le=1, description="检测器评估的召回率置信度阈值")
    seed: int = Field(0, ge=0)
    box_jitter: float = Field(0.0, ge=0)
    conf_jitter: float = Field(0.0, ge=0)
    drop_prob: float = Field(0.0, ge=0, le=1)
    lead_frames: Tuple[int, int] = (0, 0)
    output_dir: str = Field("results", description="输出目录")
    workers: int = Field(4, ge=1)
    progress: bool = False

    @field_validator("iou_thresholds", "pap_thresholds_s")
    @classmethod
    def _ascending(cls, value: List[float]) -> List[float]:
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"列表必须严格升序: {value}")
        return value

    @field_validator("triggers")
    @classmethod
    def _known_triggers(cls, value: List[str]) -> List[str]:
        for t in value:
            if t not in ("oracle", "baseline") and not (t.isdigit() and int(t) >= 1):
                raise ValueError(f"未知的触发方式: {t}")
        if len(set(value)) != len(value):
            raise ValueError(f"触发方式重复: {value}")
        return value

    @field_validator("lead_frames")
    @classmethod
    def _ordered_lead(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] > value[1]:
            raise ValueError(f"lead_frames 下界大于上界: {value}")
        return value

    def backend_options(self) -> BackendOptions:
        return BackendOptions(
            seed=self.seed,
            box_jitter=self.box_jitter,
            conf_jitter=self.conf_jitter,
            drop_prob=self.drop_prob,
            lead_frames=self.lead_frames,
        )

    def rows(self) -> List["RowSpec"]:
        return [RowSpec(trigger, threshold) for trigger in self.triggers for threshold in self.iou_thresholds]


@dataclass(frozen=True)
class RowSpec:
    trigger: str
    iou_threshold: float

    @property
    def name(self) -> str:
        label = self.trigger if not self.trigger.isdigit() else f"window{self.trigger}"
        return f"{label}@{self.iou_threshold:g}"

    @property
    def mode(self) -> TriggerMode:
        if self.trigger == "baseline":
            return TriggerMode.BASELINE
        if self.trigger == "oracle":
            return TriggerMode.CURRENT
        return TriggerMode.WINDOW

    @property
    def window(self) -> Optional[int]:
        if self.mode != TriggerMode.WINDOW:
            return None
        return int(self.trigger)

    def recognizer_spec(self, cfg: ExperimentConfig) -> str:
        if self.trigger == "oracle":
            return "oracle"
        if self.trigger == "baseline":
            return "none"
        return cfg.recognizer


@dataclass
class RowResult:
    spec: RowSpec
    events: Dict[str, List[InteractionEvent]] = field(default_factory=dict)
    invocations: Dict[str, int] = field(default_factory=dict)
    hoi: Optional[Dict[str, float]] = None
    p_ap: Optional[Dict[str, Any]] = None
    timing: Dict[str, Any] = field(default_factory=dict)
    error: Optional[Dict[str, str]] = None

    def payload(self) -> Dict[str, Any]:
        return {
            "name": self.spec.name,
            "trigger": self.spec.trigger,
            "window": self.spec.window,
            "iou_threshold": self.spec.iou_threshold,
            "hoi": self.hoi,
            "p_ap": self.p_ap,
            "od_invocations": sum(self.invocations.values()),
            "events": sum(len(e) for e in self.events.values()),
            "error": self.error,
        }


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: List[RowResult]
    detector: Optional[Dict[str, Any]]

    def row(self, name: str) -> RowResult:
        for r in self.rows:
            if r.spec.name == name:
                return r
        raise KeyError(name)

    def payload(self) -> Dict[str, Any]:
        return {
            "config": self.config.model_dump(mode="json", exclude={"output_dir", "workers", "progress"}),
            "detector": self.detector,
            "rows": [r.payload() for r in self.rows],
        }


def _pap_thresholds(cfg: ExperimentConfig, corpus: Corpus) -> Tuple[List[int], float]:
    rates = {entry.fps for entry in corpus.manifest.videos}
    if len(rates) != 1:
        raise ConfigError("语料中各视频帧率不一致，无法换算 p-AP 时间阈值", fps=sorted(rates))
    fps = rates.pop()
    return default_thresholds(fps, cfg.pap_thresholds_s), fps


def run_row(cfg: ExperimentConfig, corpus: Corpus, spec: RowSpec) -> RowResult:
    """运行一个配置行；任何模块错误记录在行内，不影响其它行"""
    result = RowResult(spec=spec)
    timer = StageTimer()
    cascade_cfg = CascadeConfig(
        window_frames=spec.window or CascadeConfig.window_frames,
        recognizer_threshold=cfg.recognizer_threshold,
        mode=spec.mode,
        association=AssociationConfig(iou_threshold=spec.iou_threshold, max_hands=cfg.max_hands),
        detector_conf_threshold=cfg.detector_conf_threshold,
    )
    opts = cfg.backend_options()
    hoi_inputs = {}
    pap_inputs = {}
    try:
        for video_id in corpus.video_ids:
            recognizer = build_recognizer(spec.recognizer_spec(cfg), corpus, video_id, opts)
            detector = build_detector(cfg.detector, corpus, video_id, opts)
            try:
                runner = CascadeRunner(recognizer, detector, corpus.geometry(video_id), cascade_cfg, timer=timer)
                events = run_frames(runner, replay(corpus, video_id, math.inf))
            finally:
                for backend in (recognizer, detector):
                    if backend is not None:
                        backend.close()
            result.events[video_id] = events
            result.invocations[video_id] = runner.invocations

            # HOI AP 只在接触点帧上评估
            contact_points = corpus.contact_points(video_id)
            gt_frames = set(contact_points)
            hoi_inputs[video_id] = (
                [e for e in events if e.frame_index in gt_frames],
                corpus.hoi_gt(video_id, contact_points),
            )
            if recognizer is not None:
                points = [PointPrediction(p.frame_index, p.confidence) for p in runner.predictions if p.is_contact]
                pap_inputs[video_id] = (points, contact_points)

        result.hoi = hoi_ap_corpus(hoi_inputs, cfg.hoi_box_iou).to_dict()
        if pap_inputs:
            thresholds, fps = _pap_thresholds(cfg, corpus)
            result.p_ap = p_ap_corpus(pap_inputs, thresholds, fps).to_dict()
    except (HoiError, ValueError) as e:
        context = getattr(e, "context", {})
        result.error = {"type": type(e).__name__, "message": str(e)}
        logger.error("配置行运行失败", {"row": spec.name, "error": str(e), **{k: str(v) for k, v in context.items()}})
    result.timing = timer.summary()
    return result


def _detector_report(cfg: ExperimentConfig, corpus: Corpus) -> Dict[str, Any]:
    """在全部标注帧上单独评估检测后端"""
    opts = cfg.backend_options()
    predictions = {}
    ground_truth = {}
    for video_id in corpus.video_ids:
        detector = build_detector(cfg.detector, corpus, video_id, opts)
        try:
            for f, ann in sorted(corpus.frames(video_id).items()):
                predictions[(video_id, f)] = detector.detect(f)
                ground_truth[(video_id, f)] = [(h.to_bbox(), 0) for h in ann.hands] + [
                    (o.to_bbox(), o.class_id) for o in ann.active_objects + ann.objects
                ]
        finally:
            detector.close()
    return detection_metrics(predictions, ground_truth, iou_threshold=0.5, conf_threshold=cfg.od_conf_threshold).to_dict()


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_outputs(result: ExperimentResult, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESULTS_FILE).write_text(
        json.dumps(result.payload(), sort_keys=True, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    (out_dir / TIMING_FILE).write_text(
        json.dumps({r.spec.name: r.timing for r in result.rows}, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    with (out_dir / EVENTS_FILE).open("w", encoding="utf-8") as fh:
        for row in result.rows:
            for video_id in sorted(row.events):
                for event in row.events[video_id]:
                    fh.write(_dumps({"row": row.spec.name, "video_id": video_id, "event": event.to_dict()}) + "\n")


def evaluate(cfg: ExperimentConfig, corpus: Optional[Corpus] = None, write: bool = True) -> ExperimentResult:
    """运行全部配置行并写出结果"""
    # 语料和后端描述先于任何后端构建完成校验
    corpus = corpus or load_corpus(cfg.corpus)
    if not corpus.video_ids:
        raise CorpusError("语料为空", path=cfg.corpus)
    validate_spec(cfg.recognizer, BackendRole.RECOGNIZER)
    validate_spec(cfg.detector, BackendRole.DETECTOR)
    specs = cfg.rows()
    logger.info("开始评估", {"rows": [s.name for s in specs], "videos": len(corpus.video_ids), "seed": cfg.seed})

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(run_row, cfg, corpus, spec) for spec in specs]
        rows = [f.result() for f in tqdm(futures, desc="评估进度", unit="行", disable=not cfg.progress)]

    try:
        detector = _detector_report(cfg, corpus)
    except HoiError as e:
        logger.error("检测器评估失败", {"error": str(e)})
        detector = {"error": {"type": type(e).__name__, "message": str(e)}}

    result = ExperimentResult(config=cfg, rows=rows, detector=detector)
    if write:
        write_outputs(result, Path(cfg.output_dir))
    for row in rows:
        logger.info("配置行完成", {"row": row.spec.name, "hoi": row.hoi, "error": row.error})
    return result
