# app/api/__init__.py
"""
API路由包初始化文件
"""

from fastapi import APIRouter

from app.api.routes import routers

# 创建主路由器
api_router = APIRouter()

for r in routers:
    api_router.include_router(r)
