"""外部数据集标注转换接口"""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Union

from app.services.dataset.corpus import Corpus


class AnnotationConverter(ABC):
    """把外部数据集的标注转换为本项目的语料格式（见 docs/corpus.md）"""

    @abstractmethod
    def convert(self, source: Union[str, Path]) -> Corpus:
        pass


class Enigma51Converter(AnnotationConverter):
    def convert(self, source: Union[str, Path]) -> Corpus:
        raise NotImplementedError(
            "ENIGMA-51 原始标注格式未公开，转换器尚未实现；"
            "目标格式为 manifest.json + annotations/<video_id>.jsonl，字段定义见 docs/corpus.md"
        )
