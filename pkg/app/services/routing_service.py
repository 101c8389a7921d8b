# app/services/routing_service.py
"""
路由服务
- 离线阶段：在代表性负载网格上测量 x=0 / x=1 的 T2+ TTFT 与 TPOT，生成决策表
- 在线阶段：逐请求离散化负载并查表；Turn 1 固定走 P→D（带 KV 传输）
- 静态 x 的确定性步进选择、会话表、滑动窗口 QPS 估计
"""

import json
import logging
import threading
from collections import Counter, deque
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from pydantic import ValidationError

from app.schemas.routing import (
    QPS_GRID,
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
    WorkloadKey,
)
from app.schemas.workload import (
    RATIO_HIGH,
    RATIO_LOW,
    TurnProfile,
    TurnRequest,
    WorkloadCategory,
    WorkloadSpec,
    classify_ratio,
)
from app.services.exceptions import ValidationException

logger = logging.getLogger(__name__)

# 上下文等级阈值：small < 4096 ≤ medium < 16384 ≤ large
CONTEXT_MEDIUM = 4096
CONTEXT_LARGE = 16384

# 固定的默认构建时间，保证同样输入产生逐字节相同的决策表文件
DEFAULT_BUILT_AT = "1970-01-01T00:00:00+00:00"

# runner(spec, x) -> (T2+ TTFT 均值, TPOT 均值)
Runner = Callable[[WorkloadSpec, int], Tuple[float, float]]


# ============== 离散化 ==============

def context_class(n_ctx: int, medium: int = CONTEXT_MEDIUM, large: int = CONTEXT_LARGE) -> ContextClass:
    if n_ctx < medium:
        return ContextClass.SMALL
    if n_ctx < large:
        return ContextClass.MEDIUM
    return ContextClass.LARGE


def qps_bin(q: float, grid: Sequence[float] = QPS_GRID) -> float:
    """最近的网格值；距离相等时取较低的一档"""
    best = grid[0]
    for value in grid[1:]:
        if abs(q - value) < abs(q - best):
            best = value
    return best


def discretize(t: int, n_in: int, n_out: int, n_ctx: int, q: float) -> WorkloadKey:
    """
    把请求负载映射到最近的基准网格键

    n_out=0 视为预填充为主
    """
    if t < 2:
        raise ValidationException("Turn 1 请求不查决策表")
    return WorkloadKey(
        context_class=context_class(n_ctx),
        workload_type=classify_ratio(n_in, n_out, RATIO_LOW, RATIO_HIGH),
        qps_bin=qps_bin(q),
    )


# ============== 离线阶段：构建决策表 ==============

# 每个键的代表性负载（各类别的中心点，两轮对话）
_CONTEXT_TURN1 = {
    ContextClass.SMALL: TurnProfile(input=1024, output=256),
    ContextClass.MEDIUM: TurnProfile(input=8192, output=256),
    ContextClass.LARGE: TurnProfile(input=24576, output=256),
}
_TYPE_TURN2 = {
    WorkloadCategory.DECODE_HEAVY: TurnProfile(input=128, output=512),
    WorkloadCategory.BALANCED: TurnProfile(input=384, output=384),
    WorkloadCategory.PREFILL_HEAVY: TurnProfile(input=2048, output=256),
}


def representative_spec(key: WorkloadKey, duration: float = 10.0, num_turns: int = 2) -> WorkloadSpec:
    """网格键对应的代表性合成负载"""
    return WorkloadSpec(
        workload_id=f"grid_{key.as_string().replace('|', '_')}",
        turn1=_CONTEXT_TURN1[key.context_class],
        turn2plus=_TYPE_TURN2[key.workload_type],
        num_turns=num_turns,
        qps=key.qps_bin,
        duration_s=duration,
    )


def default_grid(
    qps_levels: Sequence[float] = QPS_GRID,
    duration: float = 10.0,
) -> List[Tuple[WorkloadKey, WorkloadSpec]]:
    """完整的 3 × 3 × 10 基准网格"""
    grid = []
    for ctx in ContextClass:
        for wtype in WorkloadCategory:
            for q in qps_levels:
                key = WorkloadKey(context_class=ctx, workload_type=wtype, qps_bin=q)
                grid.append((key, representative_spec(key, duration)))
    return grid


def workload_grid(
    spec: WorkloadSpec,
    qps_levels: Sequence[float] = QPS_GRID,
) -> List[Tuple[WorkloadKey, WorkloadSpec]]:
    """用某个具体负载在各 QPS 档位上测量（键由该负载 Turn 2 的特征决定）"""
    n_ctx = spec.turn1.input_tokens + spec.turn1.output_tokens
    grid = []
    for q in qps_levels:
        key = discretize(2, spec.turn2plus.input_tokens, spec.turn2plus.output_tokens, n_ctx, q)
        grid.append((key, spec.with_qps(q)))
    return grid


def measure_grid(grid: Sequence[Tuple[WorkloadKey, WorkloadSpec]], runner: Runner) -> List[GridMeasurement]:
    """对每个网格点分别以 x=0、x=1 运行；失败的点记录错误（之后标记为不可用）"""
    measurements = []
    for key, spec in grid:
        try:
            ttft_x0, tpot_x0 = runner(spec, 0)
            ttft_x1, tpot_x1 = runner(spec, 1)
            measurements.append(GridMeasurement(
                key=key, ttft_x0=ttft_x0, ttft_x1=ttft_x1, tpot_x0=tpot_x0, tpot_x1=tpot_x1,
            ))
            logger.info(f"测量 {key.as_string()}: ttft {ttft_x0:.4f}->{ttft_x1:.4f}, tpot {tpot_x0:.5f}->{tpot_x1:.5f}")
        except Exception as e:
            logger.warning(f"测量 {key.as_string()} 失败: {e}")
            measurements.append(GridMeasurement(key=key, error=str(e)))
    return measurements


def make_entry(m: GridMeasurement, weights: SLOWeights) -> DecisionEntry:
    """
    决策表条目：
    Δ_ttft = (ttft_x0 − ttft_x1) / ttft_x0
    Δ_tpot = (tpot_x1 − tpot_x0) / tpot_x0
    score = w_ttft·Δ_ttft − w_tpot·Δ_tpot，score > 0 时 x* = 1
    """
    if not m.ok or m.ttft_x0 <= 0 or m.tpot_x0 <= 0:
        return DecisionEntry(
            key=m.key,
            ttft_x0=m.ttft_x0, ttft_x1=m.ttft_x1, tpot_x0=m.tpot_x0, tpot_x1=m.tpot_x1,
            x_star=0,
            available=False,
        )
    delta_ttft = (m.ttft_x0 - m.ttft_x1) / m.ttft_x0
    delta_tpot = (m.tpot_x1 - m.tpot_x0) / m.tpot_x0
    score = weights.w_ttft * delta_ttft - weights.w_tpot * delta_tpot
    return DecisionEntry(
        key=m.key,
        ttft_x0=m.ttft_x0, ttft_x1=m.ttft_x1, tpot_x0=m.tpot_x0, tpot_x1=m.tpot_x1,
        delta_ttft=delta_ttft,
        delta_tpot=delta_tpot,
        score=score,
        x_star=1 if score > 0 else 0,
    )


def table_from_measurements(
    measurements: Sequence[GridMeasurement],
    weights: SLOWeights,
    calibration_hash: str = "",
    built_at: str = DEFAULT_BUILT_AT,
) -> DecisionTable:
    """由测量结果与权重生成决策表（权重扫描复用同一批测量）"""
    entries = {}
    for m in measurements:
        entry = make_entry(m, weights)
        entries[m.key.as_string()] = entry
    unavailable = sum(1 for e in entries.values() if not e.available)
    if unavailable:
        logger.warning(f"决策表中 {unavailable} 个条目不可用，查到时回退为 x=0")
    return DecisionTable(
        weights=weights,
        calibration_hash=calibration_hash,
        built_at=built_at,
        entries=entries,
    )


def build_decision_table(
    grid: Sequence[Tuple[WorkloadKey, WorkloadSpec]],
    weights: SLOWeights,
    runner: Runner,
    calibration_hash: str = "",
    built_at: str = DEFAULT_BUILT_AT,
) -> DecisionTable:
    """离线阶段：测量 + 生成决策表"""
    return table_from_measurements(measure_grid(grid, runner), weights, calibration_hash, built_at)


def save_table(table: DecisionTable, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(table.model_dump(mode="json"), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"决策表已保存: {path} ({len(table.entries)} 个条目)")
    return path


def load_table(path: Union[str, Path]) -> DecisionTable:
    path = Path(path)
    if not path.exists():
        raise ValidationException(f"决策表文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return DecisionTable.model_validate(json.load(f))
    except (ValidationError, json.JSONDecodeError) as e:
        raise ValidationException(f"决策表文件无效 {path}: {e}")


# ============== 静态 x：确定性步进 ==============

class StaticStride:
    """
    Bresenham 式累加器：每次决策累加 x，满 1 则送往 D
    任意 N 次决策中送往 D 的次数与 N·x 相差不超过 1
    """

    def __init__(self, x: float):
        self.x = Fraction(x).limit_denominator(1000)
        self._acc = Fraction(0)
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            self._acc += self.x
            if self._acc >= 1:
                self._acc -= 1
                return 1
            return 0


def make_stride(policy: RoutingPolicy) -> Optional[StaticStride]:
    """静态策略对应的步进器；动态策略返回 None"""
    if isinstance(policy, DynamicPolicy):
        return None
    return StaticStride(policy.x)


# ============== 会话表 ==============

class SessionTable:
    """
    会话表：conv_hash -> SessionEntry
    条目不可变，更新时整体替换；所有操作持同一把锁
    """

    def __init__(self):
        self._entries: Dict[str, SessionEntry] = {}
        self._lock = threading.Lock()

    def get(self, conv_hash: str) -> Optional[SessionEntry]:
        with self._lock:
            return self._entries.get(conv_hash)

    def update(self, conv_hash: str, now: float, assigned_pd: Optional[str] = None) -> SessionEntry:
        """新建（turn_count=1）或 turn_count+1，刷新 last_access"""
        with self._lock:
            current = self._entries.get(conv_hash)
            if current is None:
                entry = SessionEntry(conv_hash=conv_hash, turn_count=1, assigned_pd=assigned_pd, last_access=now)
            else:
                entry = SessionEntry(
                    conv_hash=conv_hash,
                    turn_count=current.turn_count + 1,
                    assigned_pd=assigned_pd if assigned_pd is not None else current.assigned_pd,
                    last_access=now,
                )
            self._entries[conv_hash] = entry
            return entry

    def put(self, entry: SessionEntry):
        """整体写回一个条目（调用方回滚用）"""
        with self._lock:
            self._entries[entry.conv_hash] = entry

    def remove(self, conv_hash: str) -> bool:
        with self._lock:
            return self._entries.pop(conv_hash, None) is not None

    def assigned_counts(self) -> Counter:
        """各端点当前分配到的会话数"""
        with self._lock:
            return Counter(e.assigned_pd for e in self._entries.values() if e.assigned_pd)

    def invalidate_assigned(self, server_ids: Sequence[str]) -> int:
        """删除指向这些节点的会话（下一轮按 Turn 1 处理）"""
        dead = set(server_ids)
        with self._lock:
            stale = [h for h, e in self._entries.items() if e.assigned_pd in dead]
            for h in stale:
                del self._entries[h]
        return len(stale)

    def evict_expired(self, now: float, ttl: float) -> int:
        with self._lock:
            stale = [h for h, e in self._entries.items() if now - e.last_access > ttl]
            for h in stale:
                del self._entries[h]
        if stale:
            logger.info(f"淘汰过期会话 {len(stale)} 个")
        return len(stale)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def session_update(sessions: SessionTable, conv_hash: str, now: float, assigned_pd: Optional[str] = None) -> SessionEntry:
    return sessions.update(conv_hash, now, assigned_pd)


def evict_expired(sessions: SessionTable, now: float, ttl: float = 3600.0) -> int:
    """删除 now − last_access > ttl 的会话，返回删除数"""
    return sessions.evict_expired(now, ttl)


# ============== QPS 估计 ==============

class QpsEstimator:
    """对话开始（Turn 1）的滑动窗口计数器"""

    def __init__(self, window: float = 10.0, prior: Optional[float] = None):
        self.window = window
        self.prior = prior
        self._times: deque = deque()
        self._first: Optional[float] = None
        self._lock = threading.Lock()

    def record(self, t: float):
        with self._lock:
            if self._first is None:
                self._first = t
            self._times.append(t)

    def rate(self, now: float) -> float:
        with self._lock:
            while self._times and self._times[0] <= now - self.window:
                self._times.popleft()
            if self._first is None:
                return self.prior or 0.0
            elapsed = min(self.window, now - self._first)
            if elapsed < 1.0:
                # 观测不足一秒时用先验值
                if self.prior is not None:
                    return self.prior
                elapsed = 1.0
            return len(self._times) / elapsed


# ============== 在线阶段：逐请求决策 ==============

def choose_x(request: TurnRequest, measured_qps: float, policy: RoutingPolicy, stride: Optional[StaticStride]) -> Tuple[int, Optional[str]]:
    """Turn 2+ 的 x：动态模式查表（缺失/不可用回退 0），静态模式走调用方持有的步进器"""
    if isinstance(policy, DynamicPolicy):
        key = discretize(
            request.turn_index,
            request.new_input_tokens,
            request.target_output_tokens,
            request.cached_context_tokens,
            measured_qps,
        )
        entry = policy.table.lookup(key)
        key_str = key.as_string()
        if entry is None or not entry.available:
            return 0, key_str
        return entry.x_star, key_str

    if stride is None:
        raise ValidationException("静态策略需要步进器（同一请求流共用一个）")
    return stride.next(), None


def decide(
    request: TurnRequest,
    measured_qps: float,
    policy: RoutingPolicy,
    sessions: SessionTable,
    conv_hash: str,
    now: float,
    stride: Optional[StaticStride],
    assign_pd: Optional[Callable[[], Optional[str]]] = None,
) -> RouteDecision:
    """
    单个请求的路由决策

    Args:
        request: 本轮请求
        measured_qps: 调用方维护的到达率估计
        policy: 静态或动态路由策略
        sessions: 会话表
        conv_hash: 首条消息摘要
        now: 当前时刻
        stride: 静态策略的步进器，同一请求流共用一个；动态策略传 None
        assign_pd: 新会话时选择 D 节点的回调
    """
    entry = sessions.get(conv_hash)
    if request.turn_index >= 2 and (entry is None or entry.assigned_pd is None):
        # 会话已被淘汰：按 Turn 1 处理
        assigned = assign_pd() if assign_pd else None
        session_update(sessions, conv_hash, now, assigned)
        return RouteDecision(target_role=NodeRole.P, x_used=0, assigned_pd=assigned, eviction_miss=True)

    if request.turn_index == 1:
        assigned = assign_pd() if assign_pd else None
        if entry is not None:
            # 同一首条消息重新开始：旧会话作废
            sessions.remove(conv_hash)
        session_update(sessions, conv_hash, now, assigned)
        return RouteDecision(target_role=NodeRole.P, x_used=0, assigned_pd=assigned)

    x, key = choose_x(request, measured_qps, policy, stride)
    updated = session_update(sessions, conv_hash, now)
    return RouteDecision(
        target_role=NodeRole.D if x == 1 else NodeRole.P,
        x_used=x,
        assigned_pd=updated.assigned_pd,
        key=key,
    )
