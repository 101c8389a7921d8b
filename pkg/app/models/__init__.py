"""
模型包初始化文件
作用：集中导入所有模型和数据库基础类
"""

from app.database import Base
from app.models.sweep_cell import CellStatus, SweepCell

__all__ = [
    "Base",
    "CellStatus",
    "SweepCell",
]
