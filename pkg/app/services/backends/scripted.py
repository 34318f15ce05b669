"""脚本驱动的后端

脚本按帧给出检测结果和接触预测，可以直接由标注生成，也可以从 JSON 文件加载。
噪声模型（框抖动、置信度抖动、丢失概率、提前量）只由种子决定，
相同种子在任何平台上输出一致；零噪声时精确复现标注。
"""

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

from app.services.backends.base import Detector, Recognizer
from app.services.dataset.corpus import Corpus
from app.services.hoi.cascade import ContactPrediction, detection_from_dict, detection_to_dict
from app.services.hoi.geometry import HAND_CLASS_ID, BBox, Detection, DetectionKind
from app.utils.exceptions import BackendError, ConfigError

SCRIPT_VERSION = 1

# 随机流标签，保证检测与识别的噪声互不影响
_DETECT_STREAM = 1
_CONTACT_STREAM = 2
_BACKGROUND_STREAM = 3


class NoiseModel(BaseModel):
    box_jitter: float = Field(0.0, ge=0, description="框坐标高斯抖动σ（像素）")
    conf_jitter: float = Field(0.0, ge=0, description="置信度抖动σ")
    drop_prob: float = Field(0.0, ge=0, le=1, description="检测或接触丢失概率")
    lead_frames: Tuple[int, int] = Field((0, 0), description="接触预测相对标注的提前帧数范围")

    @field_validator("lead_frames")
    @classmethod
    def _ordered(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] > value[1]:
            raise ValueError(f"lead_frames 下界大于上界: {value}")
        return value

    @property
    def is_noiseless(self) -> bool:
        return (
            self.box_jitter == 0
            and self.conf_jitter == 0
            and self.drop_prob == 0
            and self.lead_frames == (0, 0)
        )


class ScriptFile(BaseModel):
    """脚本文件格式，帧序号以字符串为键"""

    schema_version: int = Field(SCRIPT_VERSION)
    video_id: str
    n_frames: int = Field(..., gt=0)
    detections: Dict[str, List[dict]] = Field(default_factory=dict)
    contacts: Dict[str, float] = Field(default_factory=dict)


@dataclass
class BackendScript:
    video_id: str
    n_frames: int
    detections: Dict[int, List[Detection]] = field(default_factory=dict)
    contacts: Dict[int, float] = field(default_factory=dict)
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0

    @property
    def stream_key(self) -> int:
        return zlib.crc32(self.video_id.encode("utf-8"))

    def rng(self, *tags: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.stream_key, *tags])

    @classmethod
    def from_corpus(
        cls,
        corpus: Corpus,
        video_id: str,
        noise: Optional[NoiseModel] = None,
        seed: int = 0,
    ) -> "BackendScript":
        """由标注生成脚本：手、活动物体和可见物体都作为检测结果"""
        detections: Dict[int, List[Detection]] = {}
        for f, ann in corpus.frames(video_id).items():
            dets = [
                Detection(h.to_bbox(), DetectionKind.HAND, HAND_CLASS_ID, 1.0) for h in ann.hands
            ]
            dets.extend(
                Detection(o.to_bbox(), DetectionKind.OBJECT, o.class_id, 1.0)
                for o in ann.active_objects + ann.objects
            )
            detections[f] = dets
        return cls(
            video_id=video_id,
            n_frames=corpus.video(video_id).n_frames,
            detections=detections,
            contacts={f: 1.0 for f in corpus.contact_points(video_id)},
            noise=noise or NoiseModel(),
            seed=seed,
        )

    @classmethod
    def load(cls, path: Union[str, Path], noise: Optional[NoiseModel] = None, seed: int = 0) -> "BackendScript":
        path = Path(path)
        try:
            data = ScriptFile.model_validate_json(path.read_text(encoding="utf-8"))
            detections = {int(f): [detection_from_dict(d) for d in dets] for f, dets in data.detections.items()}
            contacts = {int(f): float(c) for f, c in data.contacts.items()}
        except FileNotFoundError as e:
            raise ConfigError("脚本文件不存在", file=str(path)) from e
        except (ValidationError, ValueError, KeyError) as e:
            raise ConfigError(f"脚本文件格式错误: {e}", file=str(path)) from e
        return cls(data.video_id, data.n_frames, detections, contacts, noise or NoiseModel(), seed)

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        payload = ScriptFile(
            video_id=self.video_id,
            n_frames=self.n_frames,
            detections={str(f): [detection_to_dict(d) for d in self.detections[f]] for f in sorted(self.detections)},
            contacts={str(f): self.contacts[f] for f in sorted(self.contacts)},
        )
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload.model_dump(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path


def _jitter_box(box: BBox, sigma: float, rng: np.random.Generator) -> BBox:
    coords = np.asarray(box.as_list()) + rng.normal(0.0, sigma, size=4)
    coords = np.clip(coords, 0.0, None)
    x0, x1 = sorted((float(coords[0]), float(coords[2])))
    y0, y1 = sorted((float(coords[1]), float(coords[3])))
    return BBox(x0, y0, x1, y1)


def _jitter_confidence(base: float, sigma: float, rng: np.random.Generator) -> float:
    return float(np.clip(base - abs(rng.normal(0.0, sigma)), 0.0, 1.0))


class ScriptedDetector(Detector):
    def __init__(self, script: BackendScript):
        super().__init__()
        self.script = script

    def _detect(self, frame_index: int, image: bytes) -> List[Detection]:
        if frame_index not in self.script.detections:
            raise BackendError("帧不在脚本中", frame_index=frame_index, video_id=self.script.video_id)
        dets = self.script.detections[frame_index]
        noise = self.script.noise
        if noise.box_jitter == 0 and noise.conf_jitter == 0 and noise.drop_prob == 0:
            return list(dets)

        rng = self.script.rng(_DETECT_STREAM, frame_index)
        out = []
        for det in dets:
            # 每个检测固定消耗 6 个随机数，结果与噪声开关组合无关
            drop = rng.random() < noise.drop_prob
            box = _jitter_box(det.bbox, noise.box_jitter, rng) if noise.box_jitter > 0 else det.bbox
            if noise.box_jitter == 0:
                rng.normal(size=4)
            conf = _jitter_confidence(det.confidence, noise.conf_jitter, rng)
            if not drop:
                out.append(Detection(box, det.kind, det.class_id, conf))
        return out


class ScriptedRecognizer(Recognizer):
    """脚本中的接触帧（经噪声处理后）输出接触，其余帧为背景"""

    def __init__(self, script: BackendScript):
        super().__init__()
        self.script = script
        self.contacts = self._apply_noise(script)

    @staticmethod
    def _apply_noise(script: BackendScript) -> Dict[int, float]:
        noise = script.noise
        lo, hi = noise.lead_frames
        rng = script.rng(_CONTACT_STREAM)
        out: Dict[int, float] = {}
        for f in sorted(script.contacts):
            drop = rng.random() < noise.drop_prob
            lead = int(rng.integers(lo, hi + 1)) if hi > lo else lo
            conf = _jitter_confidence(script.contacts[f], noise.conf_jitter, rng)
            if drop:
                continue
            g = min(max(0, f - lead), script.n_frames - 1)
            out[g] = max(out.get(g, 0.0), conf)
        return out

    def _predict(self, frame_index: int, image: bytes) -> ContactPrediction:
        if not 0 <= frame_index < self.script.n_frames:
            raise BackendError("帧序号超出脚本范围", frame_index=frame_index, n_frames=self.script.n_frames)
        if frame_index in self.contacts:
            confidence = self.contacts[frame_index]
        elif self.script.noise.conf_jitter > 0:
            rng = self.script.rng(_BACKGROUND_STREAM, frame_index)
            confidence = float(min(1.0, abs(rng.normal(0.0, self.script.noise.conf_jitter))))
        else:
            confidence = 0.0
        # 标签由级联按配置阈值重新判定
        return ContactPrediction.from_confidence(frame_index, confidence)


def scripted_detector(script: BackendScript) -> ScriptedDetector:
    return ScriptedDetector(script)


def scripted_recognizer(script: BackendScript) -> ScriptedRecognizer:
    return ScriptedRecognizer(script)
