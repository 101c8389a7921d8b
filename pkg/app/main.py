"""
FastAPI 主应用入口：网关的 HTTP 接入方式
"""

import asyncio
import logging
from contextlib import asynccontextmanager
from datetime import datetime
from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from app.api import api_router
from app.config import settings
from app.services.framing import prune_loop
from app.services.gateway_service import GatewayService

logger = logging.getLogger(__name__)


def create_app(service: Optional[GatewayService] = None, prune_interval: Optional[float] = None) -> FastAPI:
    """
    创建应用

    Args:
        service: 网关服务；缺省时按 settings.TABLE_PATH 加载决策表
        prune_interval: 后台清理周期（秒），<=0 关闭后台清理
    """
    gateway = service or GatewayService.from_table_path(settings.TABLE_PATH)
    interval = settings.PRUNE_INTERVAL_S if prune_interval is None else prune_interval

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        """应用生命周期：启动后台清理任务，关闭时取消"""
        logger.info("启动网关 HTTP 服务...")
        pruner = asyncio.create_task(prune_loop(gateway, interval)) if interval > 0 else None

        yield

        if pruner is not None:
            pruner.cancel()
            try:
                await pruner
            except asyncio.CancelledError:
                pass
        logger.info("关闭网关 HTTP 服务...")

    app = FastAPI(
        title="PPD 路由网关",
        description="多轮对话 PD 分离路由决策服务",
        version="1.0.0",
        lifespan=lifespan,
    )
    app.state.gateway = gateway

    # ============== 全局异常处理 ==============

    @app.exception_handler(RequestValidationError)
    async def validation_exception_handler(request, exc):
        """请求体不合法 -> 协议错误"""
        gateway.protocol_error(str(exc))
        return JSONResponse(
            status_code=400,
            content={"success": False, "error": f"请求格式错误: {exc}", "code": 400},
        )

    @app.exception_handler(HTTPException)
    async def http_exception_handler(request, exc):
        """服务层错误已是统一错误体，原样返回"""
        if isinstance(exc.detail, dict):
            return JSONResponse(status_code=exc.status_code, content=exc.detail)
        return JSONResponse(
            status_code=exc.status_code,
            content={"success": False, "error": str(exc.detail), "code": exc.status_code},
        )

    @app.exception_handler(Exception)
    async def general_exception_handler(request, exc):
        logger.error(f"未处理的异常: {exc}", exc_info=True)
        return JSONResponse(
            status_code=500,
            content={"success": False, "error": "服务器发生错误", "code": 500},
        )

    # ============== 健康检查端点 ==============

    @app.get("/health")
    async def health_check():
        """健康检查端点"""
        live = gateway.stats().backends
        return {
            "status": "healthy",
            "backends": live,
            "sessions": len(gateway.sessions),
            "policy": gateway.policy.mode,
            "timestamp": datetime.now().isoformat(),
        }

    app.include_router(api_router)
    return app


if __name__ == "__main__":
    """直接运行时的入口（开发环境）"""
    import uvicorn

    logging.basicConfig(
        level=logging.DEBUG if settings.DEBUG else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    uvicorn.run(
        create_app(),
        host=settings.GATEWAY_HOST,
        port=settings.GATEWAY_PORT,
        log_level="debug" if settings.DEBUG else "info",
    )
