# app/schemas/calibration.py
"""
标定表相关模式
作用：描述预填充/解码/传输服务时间系数以及干扰倍率测量点
注意：标定表加载后视为只读，可被任意并发读取
"""

from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple
from pydantic import Field, field_validator, model_validator

from app.schemas.base import StrictSchema

# 当前支持的标定文件版本
CALIBRATION_SCHEMA_VERSION = 1

# 必须出现在测量点中的锚点 (kind, prefill_tokens, concurrent_prefills, decode_batch) -> 倍率
ANCHOR_POINTS = {
    ("full", 1024, 1, 200): 1.48,
    ("append", 1024, 1, 200): 1.02,
    ("full", 1024, 4, 200): 1.57,
    ("append", 1024, 4, 200): 1.21,
}


class PrefillKind(str, Enum):
    """预填充类型"""
    FULL = "full"
    APPEND = "append"


class FullPrefillCoeffs(StrictSchema):
    """全量预填充：a_lin·n + b_quad·n²"""
    a_lin: float = Field(..., ge=0, description="秒/token")
    b_quad: float = Field(..., ge=0, description="秒/token²")


class AppendPrefillCoeffs(StrictSchema):
    """追加预填充：a_lin·m + b_cross·m·(n_ctx+m)"""
    a_lin: float = Field(..., ge=0)
    b_cross: float = Field(..., ge=0)


class DecodeCoeffs(StrictSchema):
    """解码单步：c_base + d_batch·batch"""
    c_base: float = Field(..., ge=0, description="秒/步")
    d_batch: float = Field(..., ge=0, description="秒/请求")


class InterferencePoint(StrictSchema):
    """干扰倍率测量点"""
    kind: PrefillKind
    prefill_tokens: int = Field(..., ge=0)
    concurrent_prefills: int = Field(..., ge=1)
    decode_batch: int = Field(..., ge=1)
    tpot_multiplier: float = Field(..., ge=1.0)


class ReferencePoint(StrictSchema):
    """拟合系数用的预填充耗时参考点"""
    tokens: int = Field(..., ge=1)
    seconds: float = Field(..., gt=0)


class CalibrationTable(StrictSchema):
    """标定表"""
    schema_version: int = CALIBRATION_SCHEMA_VERSION
    name: str = "default"
    full_prefill_coeffs: FullPrefillCoeffs
    append_prefill_coeffs: AppendPrefillCoeffs
    decode_coeffs: DecodeCoeffs
    kv_bytes_per_token: int = Field(262144, gt=0, description="每 token KV 字节数（默认 0.25 MB）")
    link_bandwidth: float = Field(..., gt=0, description="字节/秒")
    link_topology: str = Field("shared", pattern="^(shared|per_pair)$")
    reference_points: List[ReferencePoint] = Field(default_factory=list)
    interference_points: List[InterferencePoint]

    @field_validator("schema_version")
    @classmethod
    def validate_version(cls, v):
        if v != CALIBRATION_SCHEMA_VERSION:
            raise ValueError(f"不支持的标定文件版本: {v}")
        return v

    @model_validator(mode="after")
    def validate_points(self):
        """锚点必须存在；每种类型的测量点必须构成完整网格"""
        lookup = {
            (p.kind.value, p.prefill_tokens, p.concurrent_prefills, p.decode_batch): p.tpot_multiplier
            for p in self.interference_points
        }
        if len(lookup) != len(self.interference_points):
            raise ValueError("干扰测量点存在重复坐标")

        for anchor, value in ANCHOR_POINTS.items():
            if anchor not in lookup:
                raise ValueError(f"缺少锚点: {anchor}")

        for kind in PrefillKind:
            tokens, concs, batches = self.grid_axes(kind)
            if not tokens:
                raise ValueError(f"缺少 {kind.value} 类型的测量点")
            for t in tokens:
                for c in concs:
                    for b in batches:
                        if (kind.value, t, c, b) not in lookup:
                            raise ValueError(f"{kind.value} 测量网格不完整: 缺少 ({t}, {c}, {b})")
        return self

    def grid_axes(self, kind: PrefillKind) -> Tuple[List[int], List[int], List[int]]:
        """返回某类型测量点的三个坐标轴（升序）"""
        points = [p for p in self.interference_points if p.kind == kind]
        tokens = sorted({p.prefill_tokens for p in points})
        concs = sorted({p.concurrent_prefills for p in points})
        batches = sorted({p.decode_batch for p in points})
        return tokens, concs, batches


# ============== 运行时状态（值对象） ==============

@dataclass(frozen=True, slots=True)
class BatchState:
    """解码批次与同机预填充的状态"""
    decode_batch_size: int = 0
    colocated_full_prefill_tokens: int = 0
    colocated_append_prefill_tokens: int = 0
    concurrent_prefill_ops: int = 0
    # 按类型拆分的并发数；都为 0 时按 concurrent_prefill_ops 计
    full_prefill_ops: int = 0
    append_prefill_ops: int = 0

    def __post_init__(self):
        if min(
            self.decode_batch_size,
            self.colocated_full_prefill_tokens,
            self.colocated_append_prefill_tokens,
            self.concurrent_prefill_ops,
            self.full_prefill_ops,
            self.append_prefill_ops,
        ) < 0:
            raise ValueError("BatchState 字段不能为负")

    def ops_for(self, kind: PrefillKind) -> int:
        """某一类预填充的并发数（至少为 1）"""
        if self.full_prefill_ops or self.append_prefill_ops:
            ops = self.full_prefill_ops if kind is PrefillKind.FULL else self.append_prefill_ops
        else:
            ops = self.concurrent_prefill_ops
        return max(ops, 1)


@dataclass(slots=True)
class LinkState:
    """KV 传输链路（FIFO）占用情况"""
    busy_until: float = 0.0
    transfers: int = 0
    bytes_moved: int = 0
