# app/schemas/routing.py
"""
路由相关模式：SLO 权重、路由策略、离线决策表、会话表条目
"""

from enum import Enum
from typing import Dict, Literal, Optional, Union
from pydantic import Field, model_validator

from app.schemas.base import BaseSchema, StrictSchema
from app.schemas.workload import WorkloadCategory

# 基准测试 QPS 网格
QPS_GRID = (0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0)

DECISION_TABLE_VERSION = 1


class NodeRole(str, Enum):
    """机器类型"""
    P = "P"   # 仅预填充
    D = "D"   # 解码（x>0 时可本地追加预填充）
    R = "R"   # 副本（本地完成全部工作）


class ContextClass(str, Enum):
    """上下文长度等级"""
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


class SLOWeights(StrictSchema):
    """TTFT / TPOT 权重"""
    w_ttft: float = Field(1.0, ge=0)
    w_tpot: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def validate_not_both_zero(self):
        if self.w_ttft == 0 and self.w_tpot == 0:
            raise ValueError("w_ttft 与 w_tpot 不能同时为 0")
        return self

    @classmethod
    def parse(cls, text: str) -> "SLOWeights":
        """解析 "1,1" 形式的命令行参数"""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise ValueError(f"权重格式应为 w_ttft,w_tpot: {text}")
        return cls(w_ttft=float(parts[0]), w_tpot=float(parts[1]))


class WorkloadKey(StrictSchema):
    """离散化后的负载键"""
    context_class: ContextClass
    workload_type: WorkloadCategory
    qps_bin: float

    @model_validator(mode="after")
    def validate_bin(self):
        if self.qps_bin not in QPS_GRID:
            raise ValueError(f"qps_bin 必须取自基准网格 {QPS_GRID}: {self.qps_bin}")
        return self

    def as_string(self) -> str:
        """决策表文件中的键："context_class|workload_type|qps_bin\""""
        return f"{self.context_class.value}|{self.workload_type.value}|{self.qps_bin:g}"

    @classmethod
    def from_string(cls, text: str) -> "WorkloadKey":
        ctx, wtype, qbin = text.split("|")
        return cls(context_class=ctx, workload_type=wtype, qps_bin=float(qbin))


class DecisionEntry(StrictSchema):
    """决策表条目（离线阶段的测量值、Δ、得分与 x*）"""
    key: WorkloadKey
    ttft_x0: Optional[float] = None
    ttft_x1: Optional[float] = None
    tpot_x0: Optional[float] = None
    tpot_x1: Optional[float] = None
    delta_ttft: Optional[float] = None
    delta_tpot: Optional[float] = None
    score: Optional[float] = None
    x_star: int = Field(0, ge=0, le=1)
    available: bool = True


class GridMeasurement(BaseSchema):
    """离线阶段一个网格点在 x=0 与 x=1 下的 T2+ TTFT / TPOT 测量"""
    key: WorkloadKey
    ttft_x0: Optional[float] = None
    ttft_x1: Optional[float] = None
    tpot_x0: Optional[float] = None
    tpot_x1: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and None not in (self.ttft_x0, self.ttft_x1, self.tpot_x0, self.tpot_x1)


class DecisionTable(StrictSchema):
    """离线决策表（加载后只读）"""
    version: int = DECISION_TABLE_VERSION
    weights: SLOWeights
    calibration_hash: str
    built_at: str
    entries: Dict[str, DecisionEntry] = Field(default_factory=dict)

    def lookup(self, key: WorkloadKey) -> Optional[DecisionEntry]:
        return self.entries.get(key.as_string())


class StaticPolicy(StrictSchema):
    """静态路由：固定比例 x 的 Turn 2+ 追加预填充送往 D"""
    mode: Literal["static"] = "static"
    x: float = Field(..., ge=0.0, le=1.0)


class DynamicPolicy(StrictSchema):
    """动态路由：按决策表逐请求决定 x"""
    mode: Literal["dynamic"] = "dynamic"
    table: DecisionTable
    weights: SLOWeights = Field(default_factory=SLOWeights)


RoutingPolicy = Union[StaticPolicy, DynamicPolicy]


class SessionEntry(BaseSchema):
    """会话表条目（字段与路由代理保持一致）"""
    conv_hash: str
    turn_count: int = Field(..., ge=1)
    assigned_pd: Optional[str] = None
    last_access: float


class RouteDecision(BaseSchema):
    """单次路由决策"""
    target_role: NodeRole
    x_used: int = Field(..., ge=0, le=1)
    assigned_pd: Optional[str] = None
    eviction_miss: bool = False
    key: Optional[str] = None
