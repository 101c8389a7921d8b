# app/database.py
"""
数据库连接模块
作用：实验清单（可续跑的 sweep manifest）使用 SQLite，通过 SQLAlchemy 访问
每个清单文件一个引擎，按路径缓存
"""

import logging
from pathlib import Path
from typing import Dict, Union

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

# 所有模型的基类
Base = declarative_base()

_ENGINES: Dict[str, Engine] = {}


def get_engine(db_path: Union[str, Path]) -> Engine:
    """创建（或复用）指向某个 SQLite 文件的引擎，首次创建时建表"""
    key = str(Path(db_path).resolve())
    engine = _ENGINES.get(key)
    if engine is None:
        Path(key).parent.mkdir(parents=True, exist_ok=True)
        engine = create_engine(f"sqlite:///{key}", echo=False, future=True)
        # 导入模型以注册表结构
        from app.models import SweepCell  # noqa: F401
        Base.metadata.create_all(bind=engine)
        _ENGINES[key] = engine
    return engine


def dispose_engine(db_path: Union[str, Path]):
    """关闭并移除缓存的引擎（删除清单文件前调用）"""
    engine = _ENGINES.pop(str(Path(db_path).resolve()), None)
    if engine is not None:
        engine.dispose()


def get_session_factory(db_path: Union[str, Path]) -> sessionmaker:
    """会话工厂"""
    return sessionmaker(autocommit=False, autoflush=False, bind=get_engine(db_path))


__all__ = ["Base", "get_engine", "dispose_engine", "get_session_factory"]
