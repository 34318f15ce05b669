"""基于标注的理想接触识别

只在标注的接触点帧输出置信度 1.0 的接触，其余帧为背景，不惩罚误报。
"""

from typing import Iterable

from app.services.backends.base import Recognizer
from app.services.dataset.corpus import Corpus
from app.services.hoi.cascade import ContactLabel, ContactPrediction
from app.utils.exceptions import BackendError


class OracleRecognizer(Recognizer):
    def __init__(self, contact_points: Iterable[int], n_frames: int):
        super().__init__()
        self.contact_points = frozenset(contact_points)
        self.n_frames = n_frames

    def _predict(self, frame_index: int, image: bytes) -> ContactPrediction:
        if not 0 <= frame_index < self.n_frames:
            raise BackendError("帧序号超出标注范围", frame_index=frame_index, n_frames=self.n_frames)
        if frame_index in self.contact_points:
            return ContactPrediction(frame_index, 1.0, ContactLabel.CONTACT)
        return ContactPrediction(frame_index, 0.0, ContactLabel.BACKGROUND)


def oracle_recognizer(corpus: Corpus, video_id: str) -> OracleRecognizer:
    return OracleRecognizer(corpus.contact_points(video_id), corpus.video(video_id).n_frames)
