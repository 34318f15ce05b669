"""语料加载与写出"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from pydantic import ValidationError

from app.services.dataset.schema import (
    SCHEMA_VERSION,
    AnnotationHeader,
    CorpusManifest,
    FrameAnnotation,
    VideoEntry,
)
from app.services.hoi.geometry import ImageGeometry
from app.services.hoi.metrics import ActiveObjectGT, HandGT, HoiFrameGT
from app.utils.exceptions import CorpusError
from app.utils.logger import Logger

logger = Logger("hoi-dataset")

MANIFEST_NAME = "manifest.json"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


@dataclass
class Corpus:
    """已加载的语料，加载后只读，可在线程间共享"""

    manifest: CorpusManifest
    annotations: Dict[str, Dict[int, FrameAnnotation]]
    root: Optional[Path] = None
    _videos: Dict[str, VideoEntry] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self._videos = {v.video_id: v for v in self.manifest.videos}

    @property
    def video_ids(self) -> List[str]:
        return [v.video_id for v in self.manifest.videos]

    def video(self, video_id: str) -> VideoEntry:
        if video_id not in self._videos:
            raise CorpusError("视频不存在", video_id=video_id)
        return self._videos[video_id]

    def geometry(self, video_id: str) -> ImageGeometry:
        entry = self.video(video_id)
        return ImageGeometry(width=entry.width, height=entry.height)

    def frames(self, video_id: str) -> Dict[int, FrameAnnotation]:
        self.video(video_id)
        return self.annotations.get(video_id, {})

    def contact_points(self, video_id: str) -> List[int]:
        return sorted(f for f, ann in self.frames(video_id).items() if ann.contact_point)

    def hoi_gt(self, video_id: str, frame_indices: Optional[List[int]] = None) -> List[HoiFrameGT]:
        """转换为 HOI AP 真值；默认取接触点帧"""
        frames = self.frames(video_id)
        if frame_indices is None:
            frame_indices = self.contact_points(video_id)
        result = []
        for f in frame_indices:
            ann = frames[f]
            result.append(
                HoiFrameGT(
                    frame_index=f,
                    hands=tuple(HandGT(h.to_bbox(), h.side, h.state) for h in ann.hands),
                    active_objects=tuple(
                        ActiveObjectGT(o.to_bbox(), o.class_id, o.hand_side) for o in ann.active_objects
                    ),
                )
            )
        return result

    def to_payload(self) -> Dict:
        return {
            "manifest": self.manifest.model_dump(mode="json"),
            "annotations": {
                vid: [frames[f].model_dump(mode="json") for f in sorted(frames)]
                for vid, frames in sorted(self.annotations.items())
            },
        }

    def checksum(self) -> str:
        """解析后结构的确定性校验和"""
        return hashlib.sha256(_dumps(self.to_payload()).encode("utf-8")).hexdigest()


def _read_manifest(root: Path) -> CorpusManifest:
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise CorpusError("语料清单不存在", file=str(path))
    try:
        manifest = CorpusManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CorpusError(f"语料清单格式错误: {e.errors()[0]['msg']}", file=str(path)) from e
    if not manifest.videos:
        raise CorpusError("语料为空", file=str(path))
    return manifest


def _read_annotations(root: Path, entry: VideoEntry) -> Dict[int, FrameAnnotation]:
    path = root / entry.annotations
    if not path.is_file():
        raise CorpusError("标注文件不存在", file=str(path), video_id=entry.video_id)

    frames: Dict[int, FrameAnnotation] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                if line_no == 1:
                    header = AnnotationHeader.model_validate(data)
                    if header.schema_version != SCHEMA_VERSION or header.video_id != entry.video_id:
                        raise CorpusError("标注文件头不匹配", file=str(path), line=line_no)
                    continue
                ann = FrameAnnotation.model_validate(data)
            except json.JSONDecodeError as e:
                raise CorpusError(f"JSON解析失败: {e.msg}", file=str(path), line=line_no) from e
            except ValidationError as e:
                err = e.errors()[0]
                raise CorpusError(
                    f"标注格式错误: {err['msg']}",
                    file=str(path),
                    line=line_no,
                    frame_index=data.get("frame_index") if isinstance(data, dict) else None,
                ) from e

            if ann.video_id != entry.video_id:
                raise CorpusError("标注的 video_id 与清单不一致", file=str(path), line=line_no)
            if ann.frame_index >= entry.n_frames:
                raise CorpusError("帧序号超出视频长度", file=str(path), line=line_no, frame_index=ann.frame_index)
            if ann.frame_index in frames:
                raise CorpusError("帧标注重复", file=str(path), line=line_no, frame_index=ann.frame_index)
            frames[ann.frame_index] = ann
    return frames


def load_corpus(path: Union[str, Path]) -> Corpus:
    """加载语料并在加载时校验全部约束"""
    root = Path(path)
    if not root.is_dir():
        raise CorpusError("语料目录不存在", path=str(root))
    manifest = _read_manifest(root)
    annotations = {entry.video_id: _read_annotations(root, entry) for entry in manifest.videos}
    corpus = Corpus(manifest=manifest, annotations=annotations, root=root)
    logger.info(
        "语料加载完成",
        {
            "path": str(root),
            "videos": len(manifest.videos),
            "annotated_frames": sum(len(v) for v in annotations.values()),
        },
    )
    return corpus


def write_corpus(corpus: Corpus, path: Union[str, Path]) -> Path:
    """写出语料，输出字节稳定"""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / MANIFEST_NAME).write_text(
        json.dumps(corpus.manifest.model_dump(mode="json"), sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )
    for entry in corpus.manifest.videos:
        out = root / entry.annotations
        out.parent.mkdir(parents=True, exist_ok=True)
        frames = corpus.annotations.get(entry.video_id, {})
        lines = [_dumps(AnnotationHeader(video_id=entry.video_id).model_dump(mode="json"))]
        lines.extend(_dumps(frames[f].model_dump(mode="json")) for f in sorted(frames))
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root
