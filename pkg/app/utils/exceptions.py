"""业务异常定义"""

from typing import Optional


class HoiError(Exception):
    """HOI 服务异常基类

    exit_code: CLI 退出码
    http_status: HTTP 接口返回的状态码
    """

    exit_code = 1
    http_status = 500

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def __str__(self):
        if not self.context:
            return self.message
        ctx = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.message} ({ctx})"


class ConfigError(HoiError):
    """配置错误"""

    exit_code = 2
    http_status = 400


class CorpusError(HoiError):
    """语料加载或校验错误"""

    exit_code = 3
    http_status = 400


class BackendError(HoiError):
    """推理后端错误，携带帧上下文"""

    exit_code = 4
    http_status = 502

    def __init__(self, message: str, frame_index: Optional[int] = None, **context):
        if frame_index is not None:
            context["frame_index"] = frame_index
        super().__init__(message, **context)
        self.frame_index = frame_index


class BackendTimeoutError(BackendError):
    """外部后端响应超时"""


class HandshakeError(BackendError):
    """外部后端握手失败（版本、角色或类别表不一致）"""


class ProtocolError(BackendError):
    """线协议报文格式错误"""


class StreamOrderError(HoiError):
    """帧序号非单调，通常意味着上游分批逻辑有误"""


class ContractViolationError(HoiError):
    """调用方违反前置条件"""


class EvaluationError(HoiError):
    """评估时预测与标注不一致"""

    exit_code = 3


class SessionNotFoundError(HoiError):
    """会话不存在"""

    http_status = 404


class BatchOrderError(HoiError):
    """批次乱序或重复"""

    http_status = 409


class BatchTooLargeError(HoiError):
    """批次帧数超过上限"""

    http_status = 413


class InvalidCursorError(HoiError):
    """反馈游标超出范围"""

    http_status = 400
