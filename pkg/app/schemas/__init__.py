"""
所有 Schema 类的统一导出
"""

# 从 base.py
from app.schemas.base import BaseSchema, StrictSchema

# 从 calibration.py
from app.schemas.calibration import BatchState, CalibrationTable, LinkState, PrefillKind

# 从 workload.py
from app.schemas.workload import (
    Conversation,
    TraceFilter,
    TraceRecord,
    TurnProfile,
    TurnRequest,
    WorkloadCategory,
    WorkloadSpec,
)

# 从 routing.py
from app.schemas.routing import (
    ContextClass,
    DecisionEntry,
    DecisionTable,
    DynamicPolicy,
    GridMeasurement,
    NodeRole,
    RouteDecision,
    RoutingPolicy,
    SessionEntry,
    SLOWeights,
    StaticPolicy,
    WorkloadKey,
)

# 从 cluster.py / metrics.py / sweep.py
from app.schemas.cluster import ClusterConfig
from app.schemas.metrics import AggregateMetrics, RequestMetrics, RequestRecord, RequestStatus, RouteTaken, SimResult
from app.schemas.sweep import ConfigSpec, SweepPlan

# 从 gateway.py
from app.schemas.gateway import BackendEntry, Heartbeat, RouteQuery, RouteReply, Stats

# 导出所有
__all__ = [
    # 基础
    "BaseSchema",
    "StrictSchema",

    # 标定
    "BatchState",
    "CalibrationTable",
    "LinkState",
    "PrefillKind",

    # 负载
    "Conversation",
    "TraceFilter",
    "TraceRecord",
    "TurnProfile",
    "TurnRequest",
    "WorkloadCategory",
    "WorkloadSpec",

    # 路由
    "ContextClass",
    "DecisionEntry",
    "DecisionTable",
    "DynamicPolicy",
    "GridMeasurement",
    "NodeRole",
    "RouteDecision",
    "RoutingPolicy",
    "SessionEntry",
    "SLOWeights",
    "StaticPolicy",
    "WorkloadKey",

    # 集群、指标、实验
    "ClusterConfig",
    "AggregateMetrics",
    "RequestMetrics",
    "RequestRecord",
    "RequestStatus",
    "RouteTaken",
    "SimResult",
    "ConfigSpec",
    "SweepPlan",

    # 网关
    "BackendEntry",
    "Heartbeat",
    "RouteQuery",
    "RouteReply",
    "Stats",
]
