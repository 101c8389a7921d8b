# app/services/cost_model.py
"""
代价模型：基于标定表的服务时间与干扰倍率
- 全量预填充 O(n²)，追加预填充 O(m(n+m))
- KV 传输：payload / 带宽 + 链路 FIFO 排队
- 解码单步：基础时间 × 同机预填充干扰倍率
"""
import hashlib
import json
import logging
import warnings
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import yaml
from pydantic import ValidationError

from app.schemas.calibration import (
    BatchState,
    CalibrationTable,
    LinkState,
    PrefillKind,
)
from app.services.exceptions import CalibrationWarning, ValidationException

logger = logging.getLogger(__name__)


# ============== 标定表加载 ==============

def load_calibration(path: Union[str, Path]) -> CalibrationTable:
    """从 YAML 文件加载标定表（未知字段直接拒绝）"""
    path = Path(path)
    if not path.exists():
        raise ValidationException(f"标定文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
        calib = CalibrationTable.model_validate(raw)
    except ValidationError as e:
        raise ValidationException(f"标定文件校验失败 {path}: {e}")
    except yaml.YAMLError as e:
        raise ValidationException(f"标定文件不是合法 YAML {path}: {e}")

    logger.info(f"加载标定表: {calib.name} ({path.name}), hash={calibration_hash(calib)[:12]}")
    return calib


def calibration_hash(calib: CalibrationTable) -> str:
    """标定表的规范化 sha256 摘要（写入所有产物的 manifest）"""
    canonical = json.dumps(calib.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ============== 预填充与解码时间 ==============

def full_prefill_time(n: int, calib: CalibrationTable) -> float:
    """全量预填充耗时：a_lin·n + b_quad·n²"""
    if n < 1:
        raise ValidationException(f"预填充 token 数必须 ≥ 1, 实际 {n}")
    c = calib.full_prefill_coeffs
    return c.a_lin * n + c.b_quad * n * n


def append_prefill_time(m: int, n_ctx: int, calib: CalibrationTable) -> float:
    """追加预填充耗时：a_lin·m + b_cross·m·(n_ctx+m)"""
    if m < 1:
        raise ValidationException(f"追加预填充新 token 数必须 ≥ 1, 实际 {m}")
    if n_ctx < 0:
        raise ValidationException(f"上下文长度不能为负: {n_ctx}")
    c = calib.append_prefill_coeffs
    return c.a_lin * m + c.b_cross * m * (n_ctx + m)


def fit_prefill_coefficients(samples: Sequence[Tuple[int, float]]) -> Tuple[float, float]:
    """
    最小二乘拟合 a·n + b·n²（负系数截断为 0）

    Args:
        samples: (token 数, 实测秒数) 列表

    Returns:
        (a_lin, b_quad)
    """
    if len(samples) < 2:
        raise ValidationException("拟合至少需要两个测量点")
    n = np.array([s[0] for s in samples], dtype=float)
    t = np.array([s[1] for s in samples], dtype=float)
    design = np.column_stack([n, n * n])
    (a, b), *_ = np.linalg.lstsq(design, t, rcond=None)
    return max(float(a), 0.0), max(float(b), 0.0)


# ============== KV 传输 ==============

def kv_payload_bytes(tokens: int, calib: CalibrationTable) -> int:
    return tokens * calib.kv_bytes_per_token


def kv_service_time(tokens: int, calib: CalibrationTable) -> float:
    """空闲链路上的传输耗时：payload / 带宽"""
    if tokens < 1:
        raise ValidationException(f"传输 token 数必须 ≥ 1, 实际 {tokens}")
    return kv_payload_bytes(tokens, calib) / calib.link_bandwidth


def kv_transfer_time(tokens: int, calib: CalibrationTable, link: LinkState, now: float = 0.0) -> float:
    """
    计算一次 KV 传输从提交到完成的耗时（含 FIFO 排队），并占用链路

    Args:
        tokens: 传输的 token 数
        calib: 标定表
        link: 链路状态（会被更新）
        now: 提交时刻
    """
    service = kv_service_time(tokens, calib)
    payload = kv_payload_bytes(tokens, calib)
    start = max(now, link.busy_until)
    link.busy_until = start + service
    link.transfers += 1
    link.bytes_moved += payload
    return link.busy_until - now


# ============== 干扰倍率 ==============

class InterferenceGrid:
    """某一预填充类型的三维测量网格（tokens × 并发数 × 批大小）"""

    def __init__(self, calib: CalibrationTable, kind: PrefillKind):
        self.kind = kind
        tokens, concs, batches = calib.grid_axes(kind)
        self.axes = (
            np.array(tokens, dtype=float),
            np.array(concs, dtype=float),
            np.array(batches, dtype=float),
        )
        self.values = np.ones((len(tokens), len(concs), len(batches)), dtype=float)
        index = (
            {v: i for i, v in enumerate(tokens)},
            {v: i for i, v in enumerate(concs)},
            {v: i for i, v in enumerate(batches)},
        )
        for p in calib.interference_points:
            if p.kind != kind:
                continue
            self.values[
                index[0][p.prefill_tokens],
                index[1][p.concurrent_prefills],
                index[2][p.decode_batch],
            ] = p.tpot_multiplier

    @staticmethod
    def _bracket(axis: np.ndarray, value: float) -> Tuple[int, float, bool]:
        """返回 (左端下标, 插值权重, 是否被截断)"""
        clamped = False
        if value < axis[0]:
            value, clamped = axis[0], True
        elif value > axis[-1]:
            value, clamped = axis[-1], True
        if len(axis) == 1:
            return 0, 0.0, clamped
        i = int(np.searchsorted(axis, value, side="right")) - 1
        i = min(max(i, 0), len(axis) - 2)
        w = (value - axis[i]) / (axis[i + 1] - axis[i])
        return i, float(w), clamped

    @staticmethod
    def _lerp(a: float, b: float, w: float) -> float:
        # 锚点处精确返回测量值
        if w == 0.0:
            return a
        if w == 1.0:
            return b
        return a + (b - a) * w

    def lookup(self, tokens: float, concurrency: float, batch: float) -> Tuple[float, bool]:
        """多线性插值，返回 (倍率, 是否外推截断)"""
        (ti, tw, tc), (ci, cw, cc), (bi, bw, bc) = (
            self._bracket(self.axes[0], tokens),
            self._bracket(self.axes[1], concurrency),
            self._bracket(self.axes[2], batch),
        )
        v = self.values
        t_hi = min(ti + 1, v.shape[0] - 1)
        c_hi = min(ci + 1, v.shape[1] - 1)
        b_hi = min(bi + 1, v.shape[2] - 1)

        def along_batch(t: int, c: int) -> float:
            return self._lerp(float(v[t, c, bi]), float(v[t, c, b_hi]), bw)

        def along_conc(t: int) -> float:
            return self._lerp(along_batch(t, ci), along_batch(t, c_hi), cw)

        return self._lerp(along_conc(ti), along_conc(t_hi), tw), (tc or cc or bc)


# id(calib) -> (calib, grids)；同时持有标定表引用，保证 id 不被复用
_GRID_CACHE: Dict[int, Tuple[CalibrationTable, Dict[PrefillKind, InterferenceGrid]]] = {}


def _grids(calib: CalibrationTable) -> Dict[PrefillKind, InterferenceGrid]:
    cached = _GRID_CACHE.get(id(calib))
    if cached is None or cached[0] is not calib:
        cached = (calib, {kind: InterferenceGrid(calib, kind) for kind in PrefillKind})
        _GRID_CACHE[id(calib)] = cached
    return cached[1]


def interference_multiplier(state: BatchState, calib: CalibrationTable) -> float:
    """
    同机预填充对解码 TPOT 的干扰倍率（≥ 1）

    prefill_tokens 坐标取该类预填充的平均 token 数（按该类自己的并发数平均）；
    全量与追加同时存在时两者的超出部分（倍率-1）相加
    """
    if state.decode_batch_size == 0:
        return 1.0
    full_tokens = state.colocated_full_prefill_tokens
    append_tokens = state.colocated_append_prefill_tokens
    if full_tokens == 0 and append_tokens == 0:
        return 1.0

    grids = _grids(calib)
    results: List[float] = []
    clamped_any = False
    for kind, tokens in ((PrefillKind.FULL, full_tokens), (PrefillKind.APPEND, append_tokens)):
        if tokens == 0:
            continue
        ops = state.ops_for(kind)
        value, clamped = grids[kind].lookup(tokens / ops, ops, state.decode_batch_size)
        results.append(value)
        clamped_any = clamped_any or clamped

    if clamped_any:
        warnings.warn(
            f"干扰倍率查询超出标定范围，已截断到最近锚点: {state}",
            CalibrationWarning,
            stacklevel=2,
        )

    if len(results) == 1:
        return results[0]
    return 1.0 + sum(r - 1.0 for r in results)


def decode_step_time(state: BatchState, calib: CalibrationTable) -> float:
    """解码单步耗时：(c_base + d_batch·batch) × 干扰倍率"""
    if state.decode_batch_size < 1:
        raise ValidationException("解码批次为空")
    c = calib.decode_coeffs
    base = c.c_base + c.d_batch * state.decode_batch_size
    multiplier = interference_multiplier(state, calib)
    if multiplier == 1.0:
        return base
    return base * multiplier
