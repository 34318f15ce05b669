"""合成语料生成

生成双手与物体按已知轨迹运动的视频标注：空闲的手停在画面下方，
执行动作的手从休息位置靠近目标物体、保持接触若干帧后返回。
接触点为每段接触的第一帧。相同 (spec, seed) 输出字节一致。
"""

from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, Field

from app.services.dataset.corpus import Corpus, write_corpus
from app.services.dataset.schema import CorpusManifest, FrameAnnotation, HandRecord, ObjectRecord, VideoEntry
from app.services.hoi.cascade import ContactState
from app.services.hoi.geometry import Side
from app.utils.logger import Logger

logger = Logger("hoi-dataset")

DEFAULT_TAXONOMY = ["hand", "screwdriver", "pliers", "oscilloscope", "power_supply", "soldering_iron", "socket"]

HAND_SIZE = 80.0
OBJECT_SIZE = 60.0
OBJECT_Y = 100.0
SLOTS_X = (40.0, 160.0, 420.0, 540.0)  # 物体 x_min 候选位置，左右各两个
APPROACH_FRAMES = 5
RETREAT_FRAMES = 5

Box = Tuple[float, float, float, float]


class SynthSpec(BaseModel):
    """合成语料参数"""

    n_videos: int = Field(3, ge=1)
    n_frames: int = Field(100, gt=0)
    contacts_per_video: int = Field(4, ge=1)
    fps: float = Field(30.0, gt=0)
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)
    n_objects: int = Field(3, ge=1, le=len(SLOTS_X))
    contact_frames: Tuple[int, int] = Field((4, 8), description="接触持续帧数范围（含两端）")
    overlap_shift: Tuple[float, float] = Field((10.0, 50.0), description="手与物体纵向错位范围，决定接触 IoU")
    render_frames: bool = Field(False, description="是否写出帧图像")


def _round_box(box) -> List[float]:
    return [round(float(v), 1) for v in box]


def _lerp(a: Box, b: Box, t: float) -> Box:
    return tuple(x + (y - x) * t for x, y in zip(a, b))


def _rest_box(side: Side, spec: SynthSpec) -> Box:
    y = spec.height - 100.0
    if side == Side.LEFT:
        return (40.0, y, 40.0 + HAND_SIZE, y + HAND_SIZE)
    return (spec.width - 120.0, y, spec.width - 120.0 + HAND_SIZE, y + HAND_SIZE)


def _contact_box(obj: Box, shift: float) -> Box:
    x = obj[0] - 10.0
    y = OBJECT_Y + shift
    return (x, y, x + HAND_SIZE, y + HAND_SIZE)


def _video_annotations(video_id: str, spec: SynthSpec, rng: np.random.Generator, n_classes: int) -> List[FrameAnnotation]:
    seg = spec.n_frames // spec.contacts_per_video
    max_len = spec.contact_frames[1]
    if seg < APPROACH_FRAMES + max_len + RETREAT_FRAMES + 6:
        raise ValueError(f"视频过短，无法放置 {spec.contacts_per_video} 次接触: {spec.n_frames} 帧")

    slots = rng.choice(len(SLOTS_X), size=spec.n_objects, replace=False)
    objects: List[Tuple[Box, int]] = []
    for slot in sorted(int(s) for s in slots):
        x = SLOTS_X[slot] * spec.width / 640.0
        objects.append(((x, OBJECT_Y, x + OBJECT_SIZE, OBJECT_Y + OBJECT_SIZE), int(rng.integers(1, n_classes))))

    # 每段接触: (接触点, 持续帧数, 物体序号, 手, 接触时的手框)
    contacts = []
    for c in range(spec.contacts_per_video):
        high = min(APPROACH_FRAMES + 7, seg - max_len - RETREAT_FRAMES)
        cp = c * seg + int(rng.integers(APPROACH_FRAMES, high + 1))
        length = int(rng.integers(spec.contact_frames[0], spec.contact_frames[1] + 1))
        oi = int(rng.integers(len(objects)))
        obj_box = objects[oi][0]
        side = Side.LEFT if (obj_box[0] + obj_box[2]) / 2.0 < spec.width / 2.0 else Side.RIGHT
        shift = round(float(rng.uniform(*spec.overlap_shift)), 1)
        contacts.append((cp, length, oi, side, _contact_box(obj_box, shift)))

    frames: List[FrameAnnotation] = []
    for f in range(spec.n_frames):
        boxes: Dict[Side, Box] = {s: _rest_box(s, spec) for s in Side}
        states = {s: ContactState.NO_CONTACT for s in Side}
        active = None
        contact_point = False
        for cp, length, oi, side, pose in contacts:
            rest = _rest_box(side, spec)
            if cp - APPROACH_FRAMES <= f < cp:
                boxes[side] = _lerp(rest, pose, (f - (cp - APPROACH_FRAMES)) / APPROACH_FRAMES)
            elif cp <= f < cp + length:
                boxes[side] = pose
                states[side] = ContactState.CONTACT
                active = (oi, side)
                contact_point = f == cp
            elif cp + length <= f < cp + length + RETREAT_FRAMES:
                boxes[side] = _lerp(pose, rest, (f - (cp + length) + 1) / (RETREAT_FRAMES + 1))

        active_objects = []
        visible = []
        for oi, (box, class_id) in enumerate(objects):
            if active is not None and active[0] == oi:
                active_objects.append(ObjectRecord(bbox=_round_box(box), class_id=class_id, hand_side=active[1]))
            else:
                visible.append(ObjectRecord(bbox=_round_box(box), class_id=class_id))

        frames.append(
            FrameAnnotation(
                video_id=video_id,
                frame_index=f,
                hands=[HandRecord(bbox=_round_box(boxes[s]), side=s, state=states[s]) for s in Side],
                active_objects=active_objects,
                objects=visible,
                contact_point=contact_point,
            )
        )
    return frames


def _render(ann: FrameAnnotation, spec: SynthSpec, path: Path):
    image = Image.new("RGB", (spec.width, spec.height), (40, 40, 40))
    draw = ImageDraw.Draw(image)
    for obj in ann.objects + ann.active_objects:
        draw.rectangle(obj.bbox, fill=(70, 90, 160))
    for hand in ann.hands:
        draw.rectangle(hand.bbox, fill=(200, 160, 130))
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="JPEG", quality=85)


def build_corpus(spec: SynthSpec, seed: int, taxonomy: List[str] = None) -> Corpus:
    """在内存中构建合成语料"""
    taxonomy = list(taxonomy or DEFAULT_TAXONOMY)
    videos = []
    annotations = {}
    for vi in range(spec.n_videos):
        video_id = f"v{vi:03d}"
        rng = np.random.default_rng([seed, vi])
        frames = _video_annotations(video_id, spec, rng, len(taxonomy))
        annotations[video_id] = {a.frame_index: a for a in frames}
        videos.append(
            VideoEntry(
                video_id=video_id,
                n_frames=spec.n_frames,
                fps=spec.fps,
                width=spec.width,
                height=spec.height,
                annotations=f"annotations/{video_id}.jsonl",
                frame_pattern=f"frames/{video_id}/{{:06d}}.jpg" if spec.render_frames else None,
            )
        )
    manifest = CorpusManifest(taxonomy=taxonomy, videos=videos)
    return Corpus(manifest=manifest, annotations=annotations)


def synth_corpus(spec: SynthSpec, seed: int, out_dir: Union[str, Path]) -> Path:
    """生成合成语料并写入磁盘"""
    corpus = build_corpus(spec, seed)
    root = write_corpus(corpus, out_dir)
    if spec.render_frames:
        for entry in corpus.manifest.videos:
            for f, ann in corpus.annotations[entry.video_id].items():
                _render(ann, spec, root / entry.frame_pattern.format(f))
    logger.info(
        "合成语料已生成",
        {"path": str(root), "videos": spec.n_videos, "frames": spec.n_frames, "seed": seed},
    )
    return root
