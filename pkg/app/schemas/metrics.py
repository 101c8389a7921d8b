# app/schemas/metrics.py
"""
指标相关模式：单请求记录、聚合指标、仿真结果
"""

from enum import Enum
from typing import Any, Dict, List, Optional
from pydantic import Field, model_validator

from app.schemas.base import BaseSchema

# 成功率低于该值视为服务退化
DEGRADED_THRESHOLD = 0.95


class RouteTaken(str, Enum):
    """请求实际走的路径"""
    P_PATH = "P_path"     # P 上预填充 + KV 传输
    D_LOCAL = "D_local"   # D 上追加预填充
    R_LOCAL = "R_local"   # 副本本地处理


class RequestStatus(str, Enum):
    COMPLETED = "completed"
    TIMED_OUT = "timed_out"


class RequestRecord(BaseSchema):
    """单个请求的时间记录"""
    conv_id: str
    turn_index: int = Field(..., ge=1)
    arrival: float
    first_token: Optional[float] = None
    completion: Optional[float] = None
    output_tokens_emitted: int = Field(0, ge=0)
    route_taken: RouteTaken
    status: RequestStatus
    node: Optional[str] = None
    input_tokens: int = 0
    context_tokens: int = 0

    @model_validator(mode="after")
    def validate_completed(self):
        if self.status == RequestStatus.COMPLETED:
            if self.first_token is None or self.completion is None:
                raise ValueError("完成的请求必须有首 token 和完成时刻")
            if self.completion < self.first_token:
                raise ValueError("完成时刻早于首 token")
        return self


class RequestMetrics(BaseSchema):
    ttft: Optional[float] = None
    tpot: Optional[float] = None
    latency: Optional[float] = None
    success: bool


class AggregateMetrics(BaseSchema):
    """一次运行的聚合指标（未完成任何请求时各项为空）"""
    ttft_t1_mean: Optional[float] = None
    ttft_t1_p99: Optional[float] = None
    ttft_t2plus_mean: Optional[float] = None
    ttft_t2plus_p99: Optional[float] = None
    tpot_mean: Optional[float] = None
    latency_mean: Optional[float] = None
    tps: float = Field(0.0, ge=0)
    success_rate: float = Field(..., ge=0, le=1)
    degraded: bool
    num_requests: int = 0
    num_completed: int = 0
    d_local_ratio: Optional[float] = Field(None, description="Turn 2+ 请求中走 D 本地的比例")

    @model_validator(mode="after")
    def validate_degraded(self):
        if self.degraded != (self.success_rate < DEGRADED_THRESHOLD):
            raise ValueError("degraded 必须与 success_rate < 0.95 一致")
        return self


class LinkStats(BaseSchema):
    """KV 传输链路统计"""
    transfers: int = 0
    bytes_moved: int = 0
    busy_time: float = 0.0
    queue_delay_edges: List[float] = Field(default_factory=list)
    queue_delay_counts: List[int] = Field(default_factory=list)


class SimResult(BaseSchema):
    """一次仿真的结果"""
    records: List[RequestRecord]
    link_stats: LinkStats
    utilization: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    transfers_by_conversation: Dict[str, int] = Field(default_factory=dict)
    makespan: float = 0.0
    manifest: Dict[str, Any] = Field(default_factory=dict)
