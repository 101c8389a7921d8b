# app/schemas/gateway.py
"""
网关消息模式
帧内是带 "kind" 字段的 JSON 对象；HTTP 接口复用同一组模型
"""

from datetime import datetime
from typing import Dict, Literal, Optional
from pydantic import Field, model_validator

from app.schemas.base import BaseSchema, StrictSchema
from app.schemas.routing import NodeRole


class RouteQuery(StrictSchema):
    """路由查询：一条对话的某一轮"""
    kind: Literal["route_query"] = "route_query"
    conv_first_message: str = Field(..., min_length=1, description="对话首条消息，用于计算会话摘要")
    turn_index: int = Field(..., ge=1)
    n_in: int = Field(..., ge=1, description="本轮新输入 token 数")
    n_out_est: int = Field(..., ge=1, description="预计输出 token 数")
    n_ctx: int = Field(0, ge=0, description="已缓存上下文 token 数")

    @model_validator(mode="after")
    def validate_context(self):
        if self.turn_index == 1 and self.n_ctx != 0:
            raise ValueError("Turn 1 的 n_ctx 必须为 0")
        if self.turn_index > 1 and self.n_ctx <= 0:
            raise ValueError("Turn 2+ 必须携带已缓存上下文 n_ctx")
        return self


class SessionState(BaseSchema):
    turn_count: int
    assigned_pd: Optional[str] = None


class RouteReply(BaseSchema):
    """路由回复；status 非 ok 时 target_address 为空"""
    kind: Literal["route_reply"] = "route_reply"
    status: Literal["ok", "no_capacity", "protocol_error"] = "ok"
    target_address: Optional[str] = None
    server_id: Optional[str] = None
    target_role: Optional[NodeRole] = None
    x_used: Optional[int] = None
    eviction_miss: bool = False
    session_state: Optional[SessionState] = None
    error: Optional[str] = None


class Heartbeat(StrictSchema):
    """后端心跳（单向，不回复）"""
    kind: Literal["heartbeat"] = "heartbeat"
    server_id: str = Field(..., min_length=1)
    role: NodeRole
    address: str = Field(..., min_length=1)


class BackendEntry(BaseSchema):
    server_id: str
    role: NodeRole
    address: str
    last_heartbeat: float


class StatsQuery(StrictSchema):
    kind: Literal["stats"] = "stats"


class Stats(BaseSchema):
    """网关统计（自定义格式）"""
    kind: Literal["stats_reply"] = "stats_reply"
    requests: int = 0
    route_counts: Dict[str, int] = Field(default_factory=dict, description="按路由方式计数：P_path / D_local / R_local")
    eviction_misses: int = 0
    no_capacity: int = 0
    protocol_errors: int = 0
    decision_p99_ms: float = 0.0
    sessions: int = 0
    backends: Dict[str, int] = Field(default_factory=dict, description="按角色的存活后端数")
    started_at: datetime = Field(default_factory=datetime.now)
