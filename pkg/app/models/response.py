from typing import Any, Dict, Generic, Optional, TypeVar

from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from app.utils.exceptions import HoiError

T = TypeVar('T')


class ResponseModel(BaseModel, Generic[T]):
    """标准API响应模型

    所有API响应都使用这个标准格式:
    {
        "code": 200,             # 状态码，与 HTTP 状态码一致
        "message": "success",    # 状态消息
        "data": {},              # 响应数据(可选)
    }
    """
    code: int = Field(200, description="状态码")
    message: str = Field("success", description="状态消息")
    data: Optional[T] = Field(None, description="响应数据")


# 预定义的状态码
class StatusCode:
    SUCCESS = 200                  # 成功
    UNPROCESSABLE = 422            # 请求格式错误
    SERVER_ERROR = 500             # 服务器内部错误


# 预定义的状态消息
class StatusMessage:
    SUCCESS = "success"
    UNPROCESSABLE = "请求格式错误"
    SERVER_ERROR = "服务器内部错误"


def _plain(value: Any) -> Any:
    return value if isinstance(value, (int, float, str, bool, type(None))) else str(value)


# 成功响应工厂函数
def success_response(data: Any = None, message: str = StatusMessage.SUCCESS) -> Dict:
    """创建成功响应"""
    return {
        "code": StatusCode.SUCCESS,
        "message": message,
        "data": data
    }


# 错误响应工厂函数
def error_response(
    code: int = StatusCode.SERVER_ERROR,
    message: str = StatusMessage.SERVER_ERROR,
    data: Any = None,
) -> JSONResponse:
    """创建错误响应，HTTP 状态码与 code 一致"""
    return JSONResponse(
        status_code=code,
        content={"code": code, "message": message, "data": data},
    )


def exception_response(exc: HoiError) -> JSONResponse:
    """业务异常转换为错误响应，异常上下文放入 data

    例如批次过大时 data 为 {"session_id": ..., "frames": 61, "limit": 60}
    """
    return error_response(
        code=exc.http_status,
        message=exc.message,
        data={k: _plain(v) for k, v in exc.context.items()},
    )
