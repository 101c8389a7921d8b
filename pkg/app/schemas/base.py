# app/schemas/base.py
"""
基础模式定义
作用：避免循环导入问题，定义所有模式共享的基础类
- BaseSchema：结果、统计、内部传递的模型
- StrictSchema：从文件或网络读入的模型，多余字段视为错误
"""

from pydantic import BaseModel, ConfigDict


class BaseSchema(BaseModel):
    """所有模式的基类"""
    model_config = ConfigDict(
        populate_by_name=True,      # 字段名和别名（如 duration_s）都可以用
        str_strip_whitespace=True,
    )


class StrictSchema(BaseSchema):
    """标定 / 负载 / 实验计划 / 网关消息：未知字段直接拒绝"""
    model_config = ConfigDict(
        populate_by_name=True,
        str_strip_whitespace=True,
        extra="forbid",
    )
