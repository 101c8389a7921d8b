"""
API错误处理
服务层异常 -> HTTP 状态码 + 统一错误体 {"success": false, "error": ..., "code": ...}
"""

from fastapi import HTTPException, status
from app.services.exceptions import (
    NoCapacityException,
    NotFoundException,
    ProtocolException,
    ServiceException,
    ValidationException,
)


def error_body(message: str, code: int) -> dict:
    return {"success": False, "error": message, "code": code}


def handle_service_exception(exc: Exception) -> HTTPException:
    """处理服务层异常"""

    if isinstance(exc, NotFoundException):
        code = status.HTTP_404_NOT_FOUND
        message = str(exc)

    elif isinstance(exc, (ValidationException, ProtocolException)):
        code = status.HTTP_400_BAD_REQUEST
        message = str(exc)

    elif isinstance(exc, NoCapacityException):
        code = status.HTTP_503_SERVICE_UNAVAILABLE
        message = str(exc)

    elif isinstance(exc, ServiceException):
        code = status.HTTP_500_INTERNAL_SERVER_ERROR
        message = str(exc)

    else:
        # 其他异常不暴露细节
        code = status.HTTP_500_INTERNAL_SERVER_ERROR
        message = "服务器内部错误"

    return HTTPException(status_code=code, detail=error_body(message, code))
