import logging
from typing import Optional

from fastapi import FastAPI, Request
from starlette.exceptions import HTTPException
from fastapi.exceptions import RequestValidationError

from app.config import settings
from app.middlewares.response import RequestLogMiddleware
from app.models.response import StatusCode, StatusMessage, error_response, exception_response
from app.routers import router
from app.services.stream.pipeline import StreamService
from app.utils.exceptions import HoiError
from app.utils.logger import Logger

# 初始化日志系统
log = Logger()


def create_app(service: Optional[StreamService] = None) -> FastAPI:
    """创建应用

    Args:
        service: 已构建的流式服务；为空时在启动事件中按全局配置构建
    """
    app = FastAPI(
        title=settings.APP_NAME,
        description="HOI 实时检测流式服务",
        version="1.0.0",
        debug=settings.DEBUG,
    )
    app.state.service = service

    # 配置 uvicorn 访问日志级别，请求日志由中间件负责
    logging.getLogger("uvicorn.access").setLevel(logging.WARNING)

    app.add_middleware(RequestLogMiddleware)

    app.include_router(router.router, prefix=f"{settings.API_V1_STR}")

    # 业务异常处理
    @app.exception_handler(HoiError)
    async def hoi_exception_handler(request: Request, exc: HoiError):
        level = log.error if exc.http_status >= 500 else log.warning
        level(f"业务异常: {exc}", {"path": request.url.path, "type": type(exc).__name__})
        return exception_response(exc)

    # HTTP 异常处理
    @app.exception_handler(HTTPException)
    async def http_exception_handler(request: Request, exc: HTTPException):
        log.warning(f"HTTP异常 - 路径: {request.url.path}", {"status_code": exc.status_code, "detail": exc.detail})
        return error_response(code=exc.status_code, message=str(exc.detail))

    # 请求参数校验异常
    @app.exception_handler(RequestValidationError)
    async def validation_exception_handler(request: Request, exc: RequestValidationError):
        log.warning(f"参数校验失败 - 路径: {request.url.path}", {"errors": str(exc.errors())})
        return error_response(code=StatusCode.UNPROCESSABLE, message=StatusMessage.UNPROCESSABLE)

    # 全局异常处理
    @app.exception_handler(Exception)
    async def global_exception_handler(request: Request, exc: Exception):
        """全局异常处理器"""
        log.error(f"全局异常: {str(exc)}", {"path": request.url.path})
        return error_response(
            code=StatusCode.SERVER_ERROR,
            message=f"服务异常: {str(exc)}",
        )

    # 应用启动事件
    @app.on_event("startup")
    async def startup_event():
        """应用启动时执行"""
        if app.state.service is None:
            from app.services.stream.factory import build_service

            app.state.service = build_service(settings)
        app.state.service.start()
        log.info(f"服务启动成功 - {settings.APP_NAME}", {"mode": "DEBUG" if settings.DEBUG else "PRODUCTION"})

    # 应用关闭事件
    @app.on_event("shutdown")
    async def shutdown_event():
        """应用关闭时执行：排空模型队列后关闭可视化旁路"""
        log.info(f"服务正在关闭 - {settings.APP_NAME}")
        if app.state.service is not None:
            app.state.service.shutdown()

    return app


app = create_app()

if __name__ == "__main__":
    """开发环境启动入口"""
    import uvicorn

    uvicorn.run(
        "app.main:app",
        host=settings.APP_HOST,
        port=settings.APP_PORT,
        reload=settings.DEBUG,
        log_level=settings.LOG_LEVEL.lower(),
    )
