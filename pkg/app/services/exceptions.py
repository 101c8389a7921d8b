"""
异常定义 - 完整版
包含所有服务需要的异常类
"""


class ServiceException(Exception):
    """服务层基础异常"""
    code = 500


class NotFoundException(ServiceException):
    """资源未找到异常"""
    code = 404

    def __init__(self, resource: str, resource_id):
        message = f"{resource} ID {resource_id} 未找到"
        super().__init__(message)
        self.resource = resource
        self.resource_id = resource_id


class ValidationException(ServiceException):
    """数据验证异常"""
    code = 400


class ConfigurationException(ValidationException):
    """集群配置与路由策略不兼容（运行开始前检查）"""
    pass


class TraceFormatException(ValidationException):
    """轨迹文件格式错误，带行号"""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"轨迹文件第 {line_no} 行格式错误: {reason}")
        self.line_no = line_no


class EmptyResultException(ServiceException):
    """结果为空（过滤后没有对话、没有可用的实验格子等）"""
    code = 422


class ProtocolException(ServiceException):
    """网关协议错误（帧格式、消息类型）"""
    code = 400


class FrameTooLargeException(ProtocolException):
    """帧长度越界；之后无法再对齐帧边界"""
    pass


class NoCapacityException(ServiceException):
    """指定角色没有存活的后端"""
    code = 503

    def __init__(self, role: str):
        super().__init__(f"没有存活的 {role} 角色后端")
        self.role = role


class CalibrationWarning(UserWarning):
    """标定表外推（超出测量范围被截断）时发出的警告"""
    pass
