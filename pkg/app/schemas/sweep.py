# app/schemas/sweep.py
"""
实验计划相关模式
"""

import hashlib
import json
from typing import List, Literal, Optional, Union
from pydantic import Field, field_validator, model_validator

from app.schemas.base import StrictSchema
from app.schemas.cluster import format_x, parse_shape
from app.schemas.routing import QPS_GRID
from app.schemas.workload import WorkloadSpec


class ConfigSpec(StrictSchema):
    """计划中的一个集群配置：形状 + 路由方式"""
    shape: str
    mode: Literal["static", "dynamic"] = "static"
    x: float = Field(0.0, ge=0.0, le=1.0)

    @field_validator("shape")
    @classmethod
    def validate_shape(cls, v):
        parse_shape(v)
        return v

    @property
    def is_replica(self) -> bool:
        p, d, _ = parse_shape(self.shape)
        return p == 0 and d == 0

    @property
    def label(self) -> str:
        if self.is_replica:
            return self.shape
        if self.mode == "dynamic":
            return f"{self.shape}_ppd"
        return f"{self.shape}_x{format_x(self.x)}"

    @property
    def x_mode(self) -> str:
        """聚合表的 x_mode 列"""
        if self.is_replica:
            return "replica"
        if self.mode == "dynamic":
            return "dynamic"
        return f"x={format_x(self.x)}"


class SweepPlan(StrictSchema):
    """实验网格：配置 × 负载 × QPS × 种子"""
    name: str = "default"
    configs: List[ConfigSpec]
    workloads: List[Union[str, WorkloadSpec]] = Field(..., description="默认目录中的负载 id 或内联负载描述")
    qps_levels: List[float] = Field(default_factory=lambda: list(QPS_GRID))
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    duration: float = Field(10.0, gt=0, alias="duration_s")
    num_turns: int = Field(2, ge=1)
    max_decode_batch: int = Field(128, ge=1)
    request_timeout: float = Field(30.0, gt=0)
    calibration: Optional[str] = Field(None, description="标定文件路径（缺省用全局配置）")
    table: Optional[str] = Field(None, description="动态路由使用的决策表路径")

    @model_validator(mode="after")
    def validate_grid(self):
        if not self.configs or not self.workloads or not self.qps_levels or not self.seeds:
            raise ValueError("configs / workloads / qps_levels / seeds 都不能为空")
        if any(q <= 0 for q in self.qps_levels):
            raise ValueError("qps 必须大于 0")
        labels = [c.label for c in self.configs]
        if len(labels) != len(set(labels)):
            raise ValueError("配置标签重复")
        return self

    def plan_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def cell_count(self) -> int:
        return len(self.configs) * len(self.workloads) * len(self.qps_levels) * len(self.seeds)
