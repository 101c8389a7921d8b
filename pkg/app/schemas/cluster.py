# app/schemas/cluster.py
"""
集群配置模式（π 与 x）
"""

import re
from typing import Optional, Tuple
from pydantic import Field, model_validator

from app.schemas.base import StrictSchema
from app.schemas.calibration import CalibrationTable
from app.schemas.routing import DynamicPolicy, RoutingPolicy, StaticPolicy

_SHAPE_TOKEN = re.compile(r"^(\d+)([PDR])$")


def parse_shape(name: str) -> Tuple[int, int, int]:
    """
    展开命名配置，例如 "1P_3D" -> (1, 3, 0), "4R" -> (0, 0, 4), "1R_1P_2D" -> (1, 2, 1)

    Returns:
        (p_nodes, d_nodes, r_nodes)
    """
    counts = {"P": 0, "D": 0, "R": 0}
    tokens = name.strip().split("_")
    if not tokens or not name.strip():
        raise ValueError(f"未知的集群配置名: {name!r}")
    for token in tokens:
        match = _SHAPE_TOKEN.match(token)
        if not match:
            raise ValueError(f"未知的集群配置名: {name!r}")
        count, role = int(match.group(1)), match.group(2)
        if counts[role] or count == 0:
            raise ValueError(f"未知的集群配置名: {name!r}")
        counts[role] = count
    return counts["P"], counts["D"], counts["R"]


def format_x(x: float) -> str:
    """x 的标签格式：0, 1, 0.33, 0.5, 0.67"""
    if x == 0:
        return "0"
    if x == 1:
        return "1"
    return f"{x:.2f}".rstrip("0").rstrip(".")


class ClusterConfig(StrictSchema):
    """集群配置"""
    name: Optional[str] = None
    p_nodes: int = Field(0, ge=0)
    d_nodes: int = Field(0, ge=0)
    r_nodes: int = Field(0, ge=0)
    routing: RoutingPolicy = Field(default_factory=lambda: StaticPolicy(x=0.0), discriminator="mode")
    calib: CalibrationTable
    max_decode_batch: int = Field(128, ge=1)
    request_timeout: float = Field(30.0, gt=0)
    prefill_slots: int = Field(1, ge=1, description="每个节点同时进行的预填充数")

    @model_validator(mode="after")
    def validate_counts(self):
        if self.p_nodes + self.d_nodes + self.r_nodes < 1:
            raise ValueError("集群至少需要一个节点")
        if self.name is None:
            parts = [f"{n}{r}" for n, r in ((self.r_nodes, "R"), (self.p_nodes, "P"), (self.d_nodes, "D")) if n]
            self.name = "_".join(parts)
        return self

    @classmethod
    def from_name(cls, name: str, calib: CalibrationTable, routing: Optional[RoutingPolicy] = None, **kwargs) -> "ClusterConfig":
        """按命名配置构造（"2P_2D"、"4R"、"1R_1P_2D" 等）"""
        p, d, r = parse_shape(name)
        return cls(
            name=name,
            p_nodes=p,
            d_nodes=d,
            r_nodes=r,
            routing=routing if routing is not None else StaticPolicy(x=0.0),
            calib=calib,
            **kwargs,
        )

    @property
    def label(self) -> str:
        """结果表中的配置标签："4R"、"1P_3D_x1"、"1P_3D_ppd\""""
        if self.p_nodes == 0 and self.d_nodes == 0:
            return self.name
        if isinstance(self.routing, DynamicPolicy):
            return f"{self.name}_ppd"
        return f"{self.name}_x{format_x(self.routing.x)}"
