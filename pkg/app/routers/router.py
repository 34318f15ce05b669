import json

from fastapi import APIRouter, HTTPException, Query, Request
from pydantic import ValidationError
from starlette.concurrency import run_in_threadpool
from starlette.exceptions import HTTPException as StarletteHTTPException

from app.models.response import ResponseModel, success_response
from app.models.stream import BatchMetadata, HealthInfo, SessionCreate, SessionInfo
from app.services.stream.pipeline import StreamService
from app.utils.exceptions import BatchTooLargeError
from app.utils.logger import Logger

# 创建路由器
router = APIRouter()

# 初始化日志系统
log = Logger()


def _service(request: Request) -> StreamService:
    return request.app.state.service


# 创建会话
@router.post("/session", response_model=ResponseModel[SessionInfo])
async def create_session(body: SessionCreate, request: Request):
    """创建流式会话

    Returns:
        session_id 以及服务端确定的 fps 与画面尺寸
    """
    service = _service(request)
    data = await run_in_threadpool(service.create_session, body.video_id, body.fps, body.width, body.height)
    return success_response(data=data, message="会话创建成功")


# 关闭会话
@router.delete("/session/{session_id}")
async def close_session(session_id: str, request: Request):
    """关闭会话，已接收的帧处理完后释放后端与记录"""
    data = await run_in_threadpool(_service(request).close_session, session_id)
    return success_response(data=data, message="会话已关闭")


async def _open_form(request: Request, limit: int):
    """解析 multipart 表单，图像分段超限时按批次过大拒绝"""
    try:
        # metadata 之外每帧一个文件分段，多放一个让恰好超限一帧的批次仍能读到 metadata
        return await request.form(max_files=limit + 1)
    except StarletteHTTPException as e:
        if e.status_code == 400 and "Too many files" in str(e.detail):
            raise BatchTooLargeError("批次帧数超过上限", limit=limit) from e
        raise


# 接收帧批次
@router.post("/batch")
async def ingest_batch(request: Request):
    """接收一个 multipart 批次

    metadata 分段为 JSON：{session_id, batch_index, frames: [{frame_index, timestamp, part}]}，
    其余每个分段是一帧的编码图像，字段名与 frames[].part 对应。
    响应中携带自上次确认以来产生的全部反馈记录。
    """
    service = _service(request)
    limit = service.queue_cfg.max_batch_frames
    form = await _open_form(request, limit)
    try:
        raw = form.get("metadata")
        if raw is None:
            raise HTTPException(status_code=400, detail="缺少 metadata 分段")
        if not isinstance(raw, str):
            raw = (await raw.read()).decode("utf-8")
        try:
            meta = BatchMetadata.model_validate(json.loads(raw))
        except (json.JSONDecodeError, ValidationError) as e:
            log.warning("批次 metadata 解析失败", {"error": str(e)})
            raise HTTPException(status_code=400, detail=f"metadata 格式错误: {e}")

        frames = []
        # 超限批次不读取图像，交给 ingest 统一拒绝
        if len(meta.frames) <= limit:
            for item in meta.frames:
                part = form.get(item.part)
                if part is None:
                    raise HTTPException(status_code=400, detail=f"缺少图像分段: {item.part}")
                image = part.encode("utf-8") if isinstance(part, str) else await part.read()
                frames.append((item.frame_index, item.timestamp, image))
        else:
            frames = [(item.frame_index, item.timestamp, b"") for item in meta.frames]
    finally:
        await form.close()

    # 模型队列满时在线程池中阻塞，不占用事件循环
    data = await run_in_threadpool(service.ingest, meta.session_id, meta.batch_index, frames)
    return success_response(data=data)


# 轮询反馈
@router.get("/events")
async def poll_events(
    request: Request,
    session: str = Query(..., description="会话ID"),
    cursor: int = Query(0, ge=0, description="上次返回的 next_cursor"),
):
    return success_response(data=_service(request).poll(session, cursor))


# 健康检查
@router.get("/health", response_model=ResponseModel[HealthInfo])
async def health(request: Request):
    service = _service(request)
    return success_response(
        data={
            "running": service.running,
            "sessions": len(service.sessions),
            "model_queue": service.model_queue.qsize(),
            "vis_dropped": service.vis_queue.dropped,
        }
    )
