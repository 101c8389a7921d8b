# app/api/routes/__init__.py
"""
API路由模块
"""
from app.api.routes.gateway import router as gateway_router

routers = [gateway_router]

__all__ = ["gateway_router", "routers"]
