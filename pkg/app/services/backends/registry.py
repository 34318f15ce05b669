"""按描述字符串构建后端

    oracle                     标注驱动的理想识别（仅识别）
    scripted                   由标注生成脚本，叠加配置中的噪声
    scripted:<dir>             从 <dir>/<video_id>.json 加载脚本
    external:<transport>:...   外部进程，见 external 模块
    none                       不使用识别后端（基线模式）
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

from app.services.backends.base import BackendRole, DelayedBackend, TimedBackend
from app.services.backends.external import external_backend
from app.services.backends.oracle import oracle_recognizer
from app.services.backends.scripted import BackendScript, NoiseModel, scripted_detector, scripted_recognizer
from app.services.dataset.corpus import Corpus
from app.utils.exceptions import ConfigError


@dataclass(frozen=True)
class BackendOptions:
    seed: int = 0
    box_jitter: float = 0.0
    conf_jitter: float = 0.0
    drop_prob: float = 0.0
    lead_frames: Tuple[int, int] = (0, 0)
    timeout_s: float = 5.0
    delay_ms: float = 0.0

    @classmethod
    def from_settings(cls, settings) -> "BackendOptions":
        return cls(
            seed=settings.SEED,
            box_jitter=settings.BOX_JITTER,
            conf_jitter=settings.CONF_JITTER,
            drop_prob=settings.DROP_PROB,
            timeout_s=settings.BACKEND_TIMEOUT_S,
            delay_ms=settings.ARTIFICIAL_DELAY_MS,
        )

    def noise(self, role: BackendRole) -> NoiseModel:
        # 框抖动只作用于检测，提前量只作用于识别
        if role == BackendRole.DETECTOR:
            return NoiseModel(box_jitter=self.box_jitter, conf_jitter=self.conf_jitter, drop_prob=self.drop_prob)
        return NoiseModel(conf_jitter=self.conf_jitter, drop_prob=self.drop_prob, lead_frames=self.lead_frames)


def _script(spec: str, corpus: Corpus, video_id: str, role: BackendRole, opts: BackendOptions) -> BackendScript:
    _, _, directory = spec.partition(":")
    if not directory:
        return BackendScript.from_corpus(corpus, video_id, noise=opts.noise(role), seed=opts.seed)
    script = BackendScript.load(Path(directory) / f"{video_id}.json", noise=opts.noise(role), seed=opts.seed)
    if script.video_id != video_id:
        raise ConfigError("脚本文件与视频不一致", video_id=video_id, script=script.video_id)
    return script


def _wrap(backend, opts: BackendOptions):
    if opts.delay_ms > 0:
        backend = DelayedBackend(backend, opts.delay_ms)
    return TimedBackend(backend)


def validate_spec(spec: str, role: BackendRole):
    """只检查描述格式，不构建后端"""
    kind = spec.split(":", 1)[0]
    allowed = {"oracle", "scripted", "external", "none"} if role == BackendRole.RECOGNIZER else {"scripted", "external"}
    if kind not in allowed:
        raise ConfigError(f"不支持的{role.value}后端: {spec}", allowed=sorted(allowed))
    if kind in ("oracle", "none") and spec != kind:
        raise ConfigError(f"{kind} 后端不接受参数: {spec}")


def build_recognizer(
    spec: str,
    corpus: Corpus,
    video_id: str,
    opts: Optional[BackendOptions] = None,
    taxonomy: Optional[Sequence[str]] = None,
):
    """构建识别后端；spec 为 none 时返回 None"""
    opts = opts or BackendOptions()
    validate_spec(spec, BackendRole.RECOGNIZER)
    if spec == "none":
        return None
    if spec == "oracle":
        backend = oracle_recognizer(corpus, video_id)
    elif spec.startswith("scripted"):
        backend = scripted_recognizer(_script(spec, corpus, video_id, BackendRole.RECOGNIZER, opts))
    else:
        backend = external_backend(
            spec, BackendRole.RECOGNIZER, taxonomy or corpus.manifest.taxonomy, timeout=opts.timeout_s
        )
    return _wrap(backend, opts)


def build_detector(
    spec: str,
    corpus: Corpus,
    video_id: str,
    opts: Optional[BackendOptions] = None,
    taxonomy: Optional[Sequence[str]] = None,
):
    opts = opts or BackendOptions()
    validate_spec(spec, BackendRole.DETECTOR)
    if spec.startswith("scripted"):
        backend = scripted_detector(_script(spec, corpus, video_id, BackendRole.DETECTOR, opts))
    else:
        backend = external_backend(
            spec, BackendRole.DETECTOR, taxonomy or corpus.manifest.taxonomy, timeout=opts.timeout_s
        )
    return _wrap(backend, opts)
