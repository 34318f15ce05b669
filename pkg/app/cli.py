"""命令行入口

    python -m app.cli evaluate --corpus data/synth --trigger oracle --trigger 60 --trigger 30
    python -m app.cli report results --overlays
    python -m app.cli serve --corpus data/synth --recognizer scripted --window 60
    python -m app.cli replay --corpus data/synth --video v000 --endpoint http://127.0.0.1:8000
    python -m app.cli synth --out data/synth --videos 3 --frames 600

--config 指定 dotenv 格式的配置文件，文件中的值覆盖命令行参数。
退出码：0 成功，2 配置错误，3 语料错误，4 后端错误。
"""

import functools
import json
import math
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click
from dotenv import dotenv_values
from pydantic import ValidationError

from app.utils.exceptions import ConfigError, HoiError
from app.utils.logger import Logger

logger = Logger("hoi-cli")

# 配置文件键 -> ExperimentConfig 字段
EXPERIMENT_KEYS = {
    "CORPUS_DIR": "corpus",
    "RECOGNIZER": "recognizer",
    "DETECTOR": "detector",
    "TRIGGERS": "triggers",
    "IOU_THRESHOLDS": "iou_thresholds",
    "IOU_THRESHOLD": "iou_thresholds",
    "PAP_THRESHOLDS_S": "pap_thresholds_s",
    "RECOGNIZER_THRESHOLD": "recognizer_threshold",
    "DETECTOR_CONF_THRESHOLD": "detector_conf_threshold",
    "HOI_BOX_IOU": "hoi_box_iou",
    "MAX_HANDS": "max_hands",
    "SEED": "seed",
    "BOX_JITTER": "box_jitter",
    "CONF_JITTER": "conf_jitter",
    "DROP_PROB": "drop_prob",
    "LEAD_FRAMES": "lead_frames",
    "OUTPUT_DIR": "output_dir",
    "WORKERS": "workers",
}
LIST_FIELDS = {"triggers", "iou_thresholds", "pap_thresholds_s", "lead_frames"}


def _split(value: str) -> list:
    """列表值支持 JSON 数组或逗号分隔"""
    value = value.strip()
    if value.startswith("["):
        return json.loads(value)
    return [v.strip() for v in value.split(",") if v.strip()]


def read_config_file(path: Optional[str]) -> Dict[str, str]:
    if not path:
        return {}
    if not Path(path).is_file():
        raise ConfigError("配置文件不存在", file=path)
    return {k: v for k, v in dotenv_values(path).items() if v is not None}


def experiment_overrides(values: Dict[str, str]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for key, value in values.items():
        name = EXPERIMENT_KEYS.get(key)
        if name is None:
            continue
        overrides[name] = _split(value) if name in LIST_FIELDS else value
    return overrides


def settings_overrides(values: Dict[str, str]) -> Dict[str, Any]:
    from app.config import Settings

    overrides: Dict[str, Any] = {}
    for key, value in values.items():
        if key not in Settings.model_fields:
            continue
        if key == "TAP_DIR" and value.strip().lower() == "none":
            overrides[key] = None
        else:
            overrides[key] = _split(value) if value.strip().startswith("[") else value
    return overrides


def exit_on_error(fn):
    """业务异常转换为退出码"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except HoiError as e:
            logger.error(f"执行失败: {e}", {"type": type(e).__name__, "exit_code": e.exit_code})
            click.echo(f"错误: {e}", err=True)
            sys.exit(e.exit_code)
        except ValidationError as e:
            click.echo(f"配置错误: {e}", err=True)
            sys.exit(ConfigError.exit_code)

    return wrapper


@click.group()
def cli():
    """HOI 实时检测：离线评估、报告、流式服务与回放"""


@cli.command()
@click.option("--config", "config_file", type=click.Path(), help="dotenv 配置文件，覆盖命令行参数")
@click.option("--corpus", help="语料目录")
@click.option("--recognizer", default="scripted", show_default=True, help="窗口触发行的识别后端")
@click.option("--detector", default="scripted", show_default=True, help="检测后端")
@click.option("--trigger", "triggers", multiple=True, help="触发方式：oracle | baseline | 窗口帧数，可重复")
@click.option("--iou-threshold", "iou_thresholds", type=float, multiple=True, help="关联 IoU 阈值，可重复（升序）")
@click.option("--pap-seconds", "pap_thresholds_s", type=float, multiple=True, help="p-AP 时间阈值（秒），可重复")
@click.option("--recognizer-threshold", type=float, default=0.5, show_default=True, help="接触识别置信度阈值")
@click.option("--hoi-box-iou", type=float, default=0.5, show_default=True, help="HOI AP 框匹配 IoU")
@click.option("--seed", type=int, default=0, show_default=True, help="随机种子")
@click.option("--box-jitter", type=float, default=0.0, show_default=True, help="检测框抖动σ（像素）")
@click.option("--conf-jitter", type=float, default=0.0, show_default=True, help="置信度抖动σ")
@click.option("--drop-prob", type=float, default=0.0, show_default=True, help="丢失概率")
@click.option("--lead-frames", type=int, nargs=2, default=(0, 0), show_default=True, help="接触预测提前帧数范围")
@click.option("--output", "output_dir", default="results", show_default=True, help="输出目录")
@click.option("--workers", type=int, default=4, show_default=True, help="并行评估的配置行数")
@click.option("--progress/--no-progress", default=True, help="显示进度条")
@exit_on_error
def evaluate(config_file, **options):
    """运行离线评估，写出 results.json / timing.json / events.jsonl"""
    from app.services.harness.experiment import ExperimentConfig, evaluate as run_evaluate
    from app.services.harness.report import pipeline_table

    values = {k: v for k, v in options.items() if v not in (None, ())}
    values.update(experiment_overrides(read_config_file(config_file)))
    if not values.get("corpus"):
        raise ConfigError("需要 --corpus 或配置文件中的 CORPUS_DIR")
    cfg = ExperimentConfig(**values)
    result = run_evaluate(cfg)
    click.echo(pipeline_table(result.payload()))
    if any(row.error for row in result.rows):
        click.echo("部分配置行失败，详见日志", err=True)


@cli.command()
@click.argument("results_dir", type=click.Path())
@click.option("--overlays/--no-overlays", default=False, help="输出接触点帧叠加图")
@click.option("--limit", type=int, default=None, help="每个配置行最多输出的叠加图数量")
@exit_on_error
def report(results_dir, overlays, limit):
    """由评估结果生成文本表格与叠加图"""
    from app.services.harness.report import build_report

    click.echo(build_report(results_dir, overlays=overlays, limit=limit))


@cli.command()
@click.option("--config", "config_file", type=click.Path(), help="dotenv 配置文件，覆盖命令行参数")
@click.option("--corpus", help="语料目录")
@click.option("--recognizer", help="识别后端：oracle | scripted[:dir] | external:...")
@click.option("--detector", help="检测后端：scripted[:dir] | external:...")
@click.option("--window", type=int, help="触发窗口帧数")
@click.option("--mode", type=click.Choice(["window", "current", "baseline"]), help="触发方式")
@click.option("--iou-threshold", type=float, help="关联 IoU 阈值")
@click.option("--tap", help="可视化输出目录，none 表示不输出")
@click.option("--host", help="监听地址")
@click.option("--port", type=int, help="监听端口")
@exit_on_error
def serve(config_file, corpus, recognizer, detector, window, mode, iou_threshold, tap, host, port):
    """启动流式服务"""
    import uvicorn

    from app.config import Settings
    from app.main import create_app
    from app.services.stream.factory import build_service

    flags = {
        "CORPUS_DIR": corpus,
        "RECOGNIZER": recognizer,
        "DETECTOR": detector,
        "TRIGGER_WINDOW": window,
        "TRIGGER_MODE": mode,
        "IOU_THRESHOLD": iou_threshold,
        "TAP_DIR": None if tap in (None, "none") else tap,
        "APP_HOST": host,
        "APP_PORT": port,
    }
    values = {k: v for k, v in flags.items() if v is not None}
    values.update(settings_overrides(read_config_file(config_file)))
    settings = Settings(**values)
    service = build_service(settings)
    app = create_app(service)
    uvicorn.run(app, host=settings.APP_HOST, port=settings.APP_PORT, log_level=settings.LOG_LEVEL.lower())


@cli.command()
@click.option("--corpus", required=True, help="语料目录")
@click.option("--video", "video_id", required=True, help="视频ID")
@click.option("--speed", type=float, default=1.0, show_default=True, help="回放倍速，0 表示不限速")
@click.option("--endpoint", default="http://127.0.0.1:8000", show_default=True, help="服务地址")
@click.option("--batch-frames", type=int, default=60, show_default=True, help="每批帧数")
@click.option("--events-out", type=click.Path(), help="事件输出文件（jsonl）")
@exit_on_error
def replay(corpus, video_id, speed, endpoint, batch_frames, events_out):
    """按原始帧率回放一路视频到流式服务"""
    from app.services.dataset.corpus import load_corpus
    from app.services.dataset.replay import ReplayClient

    if speed < 0:
        raise ConfigError("speed 不能为负", speed=speed)
    loaded = load_corpus(corpus)
    client = ReplayClient(endpoint=endpoint, batch_frames=batch_frames)
    result = client.stream(loaded, video_id, speed=speed if speed > 0 else math.inf)
    if events_out:
        out = Path(events_out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", encoding="utf-8") as fh:
            for event in result.events:
                fh.write(json.dumps(event, sort_keys=True, ensure_ascii=False) + "\n")
    click.echo(
        f"会话 {result.session_id}: 发送 {result.frames_sent} 帧 / {result.batches_sent} 批，"
        f"收到 {len(result.events)} 个事件，耗时 {result.elapsed_s:.2f}s"
    )


@cli.command()
@click.option("--out", "out_dir", required=True, help="输出目录")
@click.option("--videos", type=int, default=3, show_default=True, help="视频数量")
@click.option("--frames", type=int, default=600, show_default=True, help="每个视频的帧数")
@click.option("--contacts", type=int, default=4, show_default=True, help="每个视频的接触次数")
@click.option("--fps", type=float, default=30.0, show_default=True, help="帧率")
@click.option("--seed", type=int, default=0, show_default=True, help="随机种子")
@click.option("--render/--no-render", default=False, help="是否写出帧图像")
@exit_on_error
def synth(out_dir, videos, frames, contacts, fps, seed, render):
    """生成合成语料"""
    from app.services.dataset.synth import SynthSpec, synth_corpus

    spec = SynthSpec(n_videos=videos, n_frames=frames, contacts_per_video=contacts, fps=fps, render_frames=render)
    try:
        root = synth_corpus(spec, seed, out_dir)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    click.echo(f"合成语料已写入 {root}")


if __name__ == "__main__":
    cli()
