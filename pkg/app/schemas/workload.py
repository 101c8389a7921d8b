# app/schemas/workload.py
"""
多轮对话负载相关的 Pydantic 模式
"""

from enum import Enum
from typing import List, Optional
from pydantic import Field, field_validator, model_validator

from app.schemas.base import BaseSchema, StrictSchema


# ============== 枚举类型 ==============

class WorkloadCategory(str, Enum):
    """负载类别（按 Turn 2+ 输入/输出比划分）"""
    DECODE_HEAVY = "decode_heavy"
    BALANCED = "balanced"
    PREFILL_HEAVY = "prefill_heavy"


# 输入/输出比阈值：r < 0.5 解码为主，0.5 ≤ r ≤ 2 均衡，r > 2 预填充为主
RATIO_LOW = 0.5
RATIO_HIGH = 2.0


def classify_ratio(n_in: int, n_out: int, low: float = RATIO_LOW, high: float = RATIO_HIGH) -> WorkloadCategory:
    """按输入/输出比归类；n_out=0 视为预填充为主"""
    if n_out <= 0:
        return WorkloadCategory.PREFILL_HEAVY
    r = n_in / n_out
    if r < low:
        return WorkloadCategory.DECODE_HEAVY
    if r > high:
        return WorkloadCategory.PREFILL_HEAVY
    return WorkloadCategory.BALANCED


# ============== 负载描述 ==============

class TurnProfile(StrictSchema):
    """单轮的 token 数"""
    input_tokens: int = Field(..., ge=1, alias="input", description="新输入 token 数")
    output_tokens: int = Field(..., ge=1, alias="output", description="输出 token 数")


class WorkloadSpec(StrictSchema):
    """合成负载描述（对应结构化负载文件）"""
    workload_id: str = Field("custom", description="负载标识")
    turn1: TurnProfile
    turn2plus: TurnProfile
    num_turns: int = Field(2, ge=1)
    qps: float = Field(..., description="对话到达率（对话/秒）")
    duration: float = Field(10.0, alias="duration_s", description="到达窗口（秒）")
    think_time: float = Field(0.0, ge=0, alias="think_time_s")
    jitter_pct: float = Field(0.0, ge=0, lt=100)
    category: Optional[WorkloadCategory] = None

    @field_validator("qps", "duration")
    @classmethod
    def validate_positive(cls, v):
        """到达率和时长必须为正"""
        if v <= 0:
            raise ValueError("qps 和 duration 必须大于 0")
        return v

    @model_validator(mode="after")
    def validate_category(self):
        """类别与 Turn 2+ 输入/输出比保持一致（未给出时自动推断）"""
        derived = classify_ratio(self.turn2plus.input_tokens, self.turn2plus.output_tokens)
        if self.category is None:
            self.category = derived
        elif self.category != derived:
            raise ValueError(
                f"类别 {self.category.value} 与 Turn 2+ 输入/输出比不一致（应为 {derived.value}）"
            )
        return self

    def with_qps(self, qps: float) -> "WorkloadSpec":
        """复制一份并替换到达率"""
        return self.model_copy(update={"qps": qps})

    def with_turns(self, num_turns: int) -> "WorkloadSpec":
        return self.model_copy(update={"num_turns": num_turns})


class TraceTurn(BaseSchema):
    """轨迹文件中的一轮"""
    input_tokens: int = Field(..., ge=1)
    output_tokens: int = Field(..., ge=1)


class TraceRecord(BaseSchema):
    """
    轨迹文件的一行（一个对话）
    转换脚本可以附带其他字段，导入时忽略；
    first_message_digest 缺省时由 first_message（再缺省则 conv_id）计算 MD5
    """
    conv_id: str = Field(..., min_length=1)
    first_message: Optional[str] = None
    first_message_digest: Optional[str] = Field(None, min_length=32, max_length=32)
    turns: List[TraceTurn]


class TraceFilter(StrictSchema):
    """轨迹导入过滤条件"""
    min_turns: int = Field(2, ge=1)
    prefill_heavy_only: bool = False
    sample_size: Optional[int] = Field(None, ge=1)
    seed: int = 0


# ============== 对话与请求 ==============

class TurnRequest(BaseSchema):
    """一轮请求（ψ 的 t, n_in, n_out, n_ctx 分量）"""
    conv_id: str
    turn_index: int = Field(..., ge=1)
    new_input_tokens: int = Field(..., ge=1)
    cached_context_tokens: int = Field(..., ge=0)
    target_output_tokens: int = Field(..., ge=1)
    arrival_time: Optional[float] = None

    @model_validator(mode="after")
    def validate_context(self):
        """第一轮没有上下文，之后各轮必须有"""
        if self.turn_index == 1 and self.cached_context_tokens != 0:
            raise ValueError("第 1 轮的 cached_context_tokens 必须为 0")
        if self.turn_index > 1 and self.cached_context_tokens <= 0:
            raise ValueError("第 2 轮及之后必须携带历史上下文")
        return self

    @property
    def history_tokens(self) -> int:
        """本轮完成后的会话总 token 数"""
        return self.cached_context_tokens + self.new_input_tokens + self.target_output_tokens


class Conversation(BaseSchema):
    """多轮会话"""
    conv_id: str
    first_message_digest: str = Field(..., min_length=32, max_length=32, description="MD5 十六进制")
    turns: List[TurnRequest]

    @model_validator(mode="after")
    def validate_turns(self):
        """轮次非空、连续编号、上下文等于之前各轮之和"""
        if not self.turns:
            raise ValueError("对话至少包含一轮")
        context = 0
        for expected, turn in enumerate(self.turns, start=1):
            if turn.turn_index != expected:
                raise ValueError(f"轮次编号不连续: 期望 {expected}, 实际 {turn.turn_index}")
            if turn.conv_id != self.conv_id:
                raise ValueError("轮次的 conv_id 与对话不一致")
            if turn.cached_context_tokens != context:
                raise ValueError(f"第 {expected} 轮上下文应为 {context}")
            context += turn.new_input_tokens + turn.target_output_tokens
        return self

    @property
    def num_turns(self) -> int:
        return len(self.turns)
