"""
依赖项定义
"""

from fastapi import HTTPException, Request, status

from app.services.gateway_service import GatewayService


def get_gateway_service(request: Request) -> GatewayService:
    """获取应用级网关服务（在 create_app 中挂到 app.state）"""
    service = getattr(request.app.state, "gateway", None)
    if service is None:
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail={"success": False, "error": "网关服务未初始化", "code": 503},
        )
    return service
