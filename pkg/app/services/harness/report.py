"""评估结果报告

读取 evaluate 的输出目录，生成纯文本表格（report.txt），
并可选地把接触点帧上的预测叠加到画面上输出，成功与失败用不同颜色的边框区分。
"""

import json
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from app.services.dataset.corpus import Corpus, load_corpus
from app.services.harness.experiment import EVENTS_FILE, RESULTS_FILE
from app.services.hoi.cascade import ContactState, InteractionEvent
from app.services.hoi.geometry import iou
from app.services.stream.visual_tap import FAILURE_COLOR, SUCCESS_COLOR, render_overlay
from app.utils.exceptions import ConfigError
from app.utils.logger import Logger

logger = Logger("hoi-harness")

REPORT_FILE = "report.txt"
OVERLAY_DIR = "overlays"

HOI_COLUMNS = [
    ("AP Hand", "ap_hand"),
    ("AP Hand+State", "ap_hand_state"),
    ("AP Hand+Side", "ap_hand_side"),
    ("AP Hand+All", "ap_hand_all"),
]


def _pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{value * 100:.2f}"


def _render_table(headers: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    line = "+".join("-" * (w + 2) for w in widths)
    out = [" | ".join(h.ljust(w) for h, w in zip(headers, widths)), line]
    out.extend(" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
    return "\n".join(out)


def load_results(results_dir: Union[str, Path]) -> Dict[str, Any]:
    path = Path(results_dir) / RESULTS_FILE
    if not path.is_file():
        raise ConfigError("评估结果不存在，请先运行 evaluate", file=str(path))
    return json.loads(path.read_text(encoding="utf-8"))


def threshold_table(results: Dict[str, Any]) -> str:
    """关联阈值扫描表：每个触发方式下，逐阈值列出四项 HOI AP"""
    blocks = []
    by_trigger: Dict[str, List[Dict[str, Any]]] = defaultdict(list)
    for row in results["rows"]:
        by_trigger[row["trigger"]].append(row)
    for trigger, rows in by_trigger.items():
        if len(rows) < 2:
            continue
        table = []
        for row in rows:
            hoi = row["hoi"] or {}
            table.append([f"{row['iou_threshold']:g}"] + [_pct(hoi.get(key)) for _, key in HOI_COLUMNS])
        blocks.append(f"关联阈值扫描 ({trigger})\n" + _render_table(["IoU阈值"] + [h for h, _ in HOI_COLUMNS], table))
    return "\n\n".join(blocks)


def pipeline_table(results: Dict[str, Any]) -> str:
    """触发方式对比表：每行一个配置"""
    table = []
    for row in results["rows"]:
        hoi = row["hoi"] or {}
        p_ap = row["p_ap"]["mean"] if row.get("p_ap") else None
        table.append(
            [row["name"]]
            + [_pct(hoi.get(key)) for _, key in HOI_COLUMNS]
            + [_pct(p_ap), str(row["od_invocations"]), "失败" if row.get("error") else "完成"]
        )
    headers = ["配置"] + [h for h, _ in HOI_COLUMNS] + ["p-AP", "OD调用", "状态"]
    return "流水线对比\n" + _render_table(headers, table)


def detector_table(results: Dict[str, Any]) -> str:
    det = results.get("detector") or {}
    if "ap" not in det:
        return ""
    return "检测器\n" + _render_table(["AP", "Recall", "HM"], [[_pct(det["ap"]), _pct(det["recall"]), _pct(det["hm"])]])


def _read_events(results_dir: Path) -> Dict[Tuple[str, str], Dict[int, InteractionEvent]]:
    events: Dict[Tuple[str, str], Dict[int, InteractionEvent]] = defaultdict(dict)
    path = results_dir / EVENTS_FILE
    if not path.is_file():
        return events
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            item = json.loads(line)
            event = InteractionEvent.from_dict(item["event"])
            events[(item["row"], item["video_id"])][event.frame_index] = event
    return events


def is_success(event: Optional[InteractionEvent], corpus: Corpus, video_id: str, frame_index: int, box_iou: float) -> bool:
    """接触点帧上的预测是否正确：判为接触且活动物体与标注一致"""
    if event is None or event.contact_state != ContactState.CONTACT or event.active_object is None:
        return False
    ann = corpus.frames(video_id)[frame_index]
    return any(
        o.class_id == event.active_object.class_id and iou(o.to_bbox(), event.active_object.bbox) >= box_iou
        for o in ann.active_objects
    )


def _frame_bytes(corpus: Corpus, video_id: str, frame_index: int) -> bytes:
    entry = corpus.video(video_id)
    if not entry.frame_pattern or corpus.root is None:
        return b""
    path = corpus.root / entry.frame_pattern.format(frame_index)
    return path.read_bytes() if path.is_file() else b""


def dump_overlays(
    results: Dict[str, Any],
    results_dir: Path,
    corpus: Corpus,
    limit: Optional[int] = None,
) -> int:
    """为每个配置行输出接触点帧的叠加图，返回写出的图像数量"""
    events = _read_events(results_dir)
    box_iou = results["config"].get("hoi_box_iou", 0.5)
    written = 0
    for row in results["rows"]:
        count = 0
        for video_id in corpus.video_ids:
            geom = corpus.geometry(video_id)
            row_events = events.get((row["name"], video_id), {})
            for f in corpus.contact_points(video_id):
                if limit is not None and count >= limit:
                    break
                event = row_events.get(f)
                ok = is_success(event, corpus, video_id, f, box_iou)
                canvas = render_overlay(
                    _frame_bytes(corpus, video_id, f),
                    (geom.width, geom.height),
                    event.to_dict() if event else None,
                    label=f"{row['name']} {video_id} #{f} {'成功' if ok else '失败'}",
                    border=SUCCESS_COLOR if ok else FAILURE_COLOR,
                )
                out = results_dir / OVERLAY_DIR / row["name"] / f"{video_id}_{f:06d}.jpg"
                out.parent.mkdir(parents=True, exist_ok=True)
                canvas.save(out, format="JPEG", quality=85)
                count += 1
        written += count
    return written


def build_report(
    results_dir: Union[str, Path],
    overlays: bool = False,
    limit: Optional[int] = None,
    corpus: Optional[Corpus] = None,
) -> str:
    """生成 report.txt，返回报告文本"""
    results_dir = Path(results_dir)
    results = load_results(results_dir)
    sections = [s for s in (threshold_table(results), pipeline_table(results), detector_table(results)) if s]
    text = "\n\n".join(sections) + "\n"
    (results_dir / REPORT_FILE).write_text(text, encoding="utf-8")

    if overlays:
        corpus = corpus or load_corpus(results["config"]["corpus"])
        n = dump_overlays(results, results_dir, corpus, limit)
        logger.info("叠加图输出完成", {"dir": str(results_dir / OVERLAY_DIR), "images": n})
    logger.info("报告生成完成", {"file": str(results_dir / REPORT_FILE)})
    return text
