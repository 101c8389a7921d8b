"""
网关 HTTP 路由
实现：POST /route, POST /heartbeat, GET /stats
与帧协议共用同一个 GatewayService
"""

from typing import Dict
from fastapi import APIRouter, Depends, status

from app.api.dependencies import get_gateway_service
from app.api.errors import handle_service_exception
from app.schemas.gateway import BackendEntry, Heartbeat, RouteQuery, RouteReply, Stats
from app.services.exceptions import ServiceException
from app.services.gateway_service import GatewayService

router = APIRouter(tags=["网关"])


@router.post(
    "/route",
    response_model=RouteReply,
    summary="路由查询",
    description="返回本轮应发往的后端地址与 x 取值；没有可用后端时返回 503"
)
async def route(
        query: RouteQuery,
        gateway: GatewayService = Depends(get_gateway_service)
):
    try:
        return gateway.handle_request(query)
    except ServiceException as e:
        raise handle_service_exception(e)


@router.post(
    "/heartbeat",
    response_model=Dict[str, BackendEntry],
    status_code=status.HTTP_200_OK,
    summary="后端心跳",
)
async def heartbeat(
        hb: Heartbeat,
        gateway: GatewayService = Depends(get_gateway_service)
):
    """插入或刷新后端，返回当前注册表"""
    return gateway.register_heartbeat(hb.server_id, hb.role, hb.address)


@router.get("/stats", response_model=Stats, summary="网关统计")
async def stats(gateway: GatewayService = Depends(get_gateway_service)):
    return gateway.stats()
