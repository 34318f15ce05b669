import time
from typing import Callable

from fastapi import Request, Response
from starlette.middleware.base import BaseHTTPMiddleware
from starlette.types import ASGIApp

from app.utils.logger import Logger


class RequestLogMiddleware(BaseHTTPMiddleware):
    """请求日志中间件

    每个请求记录一条请求日志和一条响应日志（方法、路径、状态码、耗时）。
    """

    def __init__(self, app: ASGIApp, exclude_paths: list = None):
        """初始化中间件

        Args:
            app: ASGI应用
            exclude_paths: 排除路径列表，这些路径不记录日志(如Swagger文档、健康检查)
        """
        super().__init__(app)
        self.exclude_paths = exclude_paths or ["/docs", "/redoc", "/openapi.json", "/health"]
        self.logger = Logger('request-middleware')

    async def dispatch(self, request: Request, call_next: Callable) -> Response:
        if any(request.url.path.startswith(path) for path in self.exclude_paths):
            return await call_next(request)

        start = time.perf_counter()
        self.logger.log_request(request.method, request.url.path)
        response = await call_next(request)
        self.logger.log_response(
            response.status_code,
            request.url.path,
            {"method": request.method, "duration_ms": round((time.perf_counter() - start) * 1000.0, 3)},
        )
        return response
