"""
业务逻辑服务层包初始化文件
"""

# 从exceptions.py导入所有异常
from app.services.exceptions import (
    ServiceException,
    NotFoundException,
    ValidationException,
    ConfigurationException,
    TraceFormatException,
    EmptyResultException,
    ProtocolException,
    FrameTooLargeException,
    NoCapacityException,
    CalibrationWarning,
)

# 导出列表
__all__ = [
    "ServiceException",
    "NotFoundException",
    "ValidationException",
    "ConfigurationException",
    "TraceFormatException",
    "EmptyResultException",
    "ProtocolException",
    "FrameTooLargeException",
    "NoCapacityException",
    "CalibrationWarning",
]
