# app/models/sweep_cell.py
"""
实验清单模型：每个 (计划, 配置, 负载, QPS, 种子) 格子一行
续跑时跳过状态为 completed 的行
"""

import enum
import json
from datetime import datetime
from typing import TYPE_CHECKING, Any, Dict, Optional

from sqlalchemy import Column, DateTime, Enum, Float, Integer, String, Text, UniqueConstraint

from app.database import Base


class CellStatus(str, enum.Enum):
    """格子状态"""
    PENDING = "pending"
    COMPLETED = "completed"
    FAILED = "failed"


class SweepCell(Base):
    """实验格子"""
    __tablename__ = "sweep_cells"
    __table_args__ = (
        UniqueConstraint("plan_hash", "config", "workload_id", "qps", "seed", name="uq_sweep_cell"),
    )

    if TYPE_CHECKING:
        plan_hash: str
        config: str
        workload_id: str
        qps: float
        seed: int
        status: CellStatus
        metrics_json: Optional[str]
        error: Optional[str]

    id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    plan_hash = Column(String(64), nullable=False, index=True, comment="计划摘要")
    config = Column(String(64), nullable=False, comment="配置标签")
    workload_id = Column(String(128), nullable=False)
    qps = Column(Float, nullable=False)
    seed = Column(Integer, nullable=False)
    status = Column(Enum(CellStatus), nullable=False, default=CellStatus.PENDING)
    metrics_json = Column(Text, nullable=True, comment="AggregateMetrics JSON")
    error = Column(Text, nullable=True)
    created_at = Column(DateTime, default=datetime.now, nullable=False)
    updated_at = Column(DateTime, default=datetime.now, onupdate=datetime.now, nullable=False)

    def __repr__(self):
        return f"<SweepCell({self.config}, {self.workload_id}, qps={self.qps}, seed={self.seed}, {self.status})>"

    @property
    def key(self):
        return self.config, self.workload_id, self.qps, self.seed

    @property
    def metrics(self) -> Optional[Dict[str, Any]]:
        if not self.metrics_json:
            return None
        return json.loads(self.metrics_json)
