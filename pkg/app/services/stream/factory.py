"""由配置构建流式服务"""

from typing import Optional

from app.services.backends.base import BackendRole
from app.services.backends.registry import BackendOptions, build_detector, build_recognizer, validate_spec
from app.services.dataset.corpus import Corpus, load_corpus
from app.services.hoi.cascade import TriggerMode
from app.services.stream.pipeline import BackendFactory, StreamService
from app.services.stream.visual_tap import VisualTap
from app.utils.exceptions import ConfigError


def make_backend_factory(
    corpus: Corpus,
    recognizer_spec: str,
    detector_spec: str,
    opts: Optional[BackendOptions] = None,
) -> BackendFactory:
    """每个会话各自构建一套后端实例"""
    validate_spec(recognizer_spec, BackendRole.RECOGNIZER)
    validate_spec(detector_spec, BackendRole.DETECTOR)
    opts = opts or BackendOptions()

    def factory(video_id: str):
        entry = corpus.video(video_id)
        recognizer = build_recognizer(recognizer_spec, corpus, video_id, opts)
        detector = build_detector(detector_spec, corpus, video_id, opts)
        return recognizer, detector, entry.fps, corpus.geometry(video_id)

    return factory


def build_service(settings, corpus: Optional[Corpus] = None) -> StreamService:
    if corpus is None:
        if not settings.CORPUS_DIR:
            raise ConfigError("未配置 CORPUS_DIR")
        corpus = load_corpus(settings.CORPUS_DIR)
    try:
        cascade_cfg = settings.cascade_config()
        queue_cfg = settings.queue_config()
    except ValueError as e:
        raise ConfigError(f"配置无效: {e}") from e
    recognizer = "none" if cascade_cfg.mode == TriggerMode.BASELINE else settings.RECOGNIZER
    factory = make_backend_factory(corpus, recognizer, settings.DETECTOR, BackendOptions.from_settings(settings))
    return StreamService(factory, cascade_cfg, queue_cfg, VisualTap(settings.TAP_DIR))
