# app/services/gateway_service.py
"""
网关服务
作用：对外提供 PPD 路由决策（只返回目标地址，不代理 token 流）
- 会话亲和：同一对话的 Turn 2+ 固定在 Turn 1 分配的端点（D 或 R）
- 心跳发现：后端定期上报，超过 backend_ttl 秒无心跳即移除
- 所有决策与清理在同一把锁内完成，回复中不会出现已被清理的后端
帧传输与 HTTP 两种接入方式共用本服务
"""

import logging
import threading
import time
from collections import Counter, deque
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

from pydantic import ValidationError

from app.config import settings
from app.schemas.gateway import (
    BackendEntry,
    Heartbeat,
    RouteQuery,
    RouteReply,
    SessionState,
    Stats,
)
from app.schemas.metrics import RouteTaken
from app.schemas.routing import DynamicPolicy, NodeRole, RoutingPolicy, SessionEntry, StaticPolicy
from app.schemas.workload import TurnRequest
from app.services.exceptions import NoCapacityException, ProtocolException
from app.services.metrics_service import percentile_nearest_rank
from app.services.routing_service import (
    QpsEstimator,
    SessionTable,
    decide,
    evict_expired,
    load_table,
    make_stride,
    session_update,
)
from app.services.workload_service import message_digest

logger = logging.getLogger(__name__)

# 决策耗时只保留最近这么多条
LATENCY_WINDOW = 10000


class GatewayService:
    """网关核心：后端注册表 + 会话表 + 路由决策"""

    def __init__(
        self,
        policy: Optional[RoutingPolicy] = None,
        session_ttl: float = 3600.0,
        backend_ttl: float = 30.0,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.policy: RoutingPolicy = policy or StaticPolicy(x=0.0)
        self.session_ttl = session_ttl
        self.backend_ttl = backend_ttl
        self._clock = clock

        self.sessions = SessionTable()
        self.qps = QpsEstimator(window=10.0)
        self.stride = make_stride(self.policy)

        self._registry: Dict[str, BackendEntry] = {}
        self._pinned: Counter = Counter()     # 端点 -> 分配到的会话数
        self._p_routed: Counter = Counter()   # P 节点 -> 已路由请求数
        self._lock = threading.RLock()

        # 统计
        self._route_counts: Counter = Counter()
        self._latencies: deque = deque(maxlen=LATENCY_WINDOW)
        self._requests = 0
        self._eviction_misses = 0
        self._no_capacity = 0
        self._protocol_errors = 0

    @classmethod
    def from_table_path(cls, table_path: Union[str, Path, None] = None, **kwargs) -> "GatewayService":
        """用决策表文件构造；文件不存在时退回静态 x=0"""
        path = Path(table_path or settings.TABLE_PATH)
        if path.exists():
            table = load_table(path)
            logger.info(f"网关加载决策表: {path} ({len(table.entries)} 个键)")
            policy: RoutingPolicy = DynamicPolicy(table=table, weights=table.weights)
        else:
            logger.warning(f"决策表不存在: {path}，使用静态 x=0")
            policy = StaticPolicy(x=0.0)
        return cls(
            policy=policy,
            session_ttl=kwargs.pop("session_ttl", settings.SESSION_TTL_S),
            backend_ttl=kwargs.pop("backend_ttl", settings.BACKEND_TTL_S),
            **kwargs,
        )

    def now(self) -> float:
        return self._clock()

    # ============== 后端注册 ==============

    def register_heartbeat(self, server_id: str, role: NodeRole, address: str, now: Optional[float] = None) -> Dict[str, BackendEntry]:
        """插入或刷新一个后端；角色变化照常接受并记录日志"""
        now = self.now() if now is None else now
        role = NodeRole(role)
        with self._lock:
            current = self._registry.get(server_id)
            if current is None:
                logger.info(f"后端注册: {server_id} ({role.value}) @ {address}")
            elif current.role != role:
                logger.warning(f"后端角色变化: {server_id} {current.role.value} -> {role.value}")
                # 原角色下的会话不再有效
                self.sessions.invalidate_assigned([server_id])
                self._pinned.pop(server_id, None)
            self._registry[server_id] = BackendEntry(
                server_id=server_id, role=role, address=address, last_heartbeat=now
            )
            return dict(self._registry)

    def prune_dead(self, now: Optional[float] = None) -> List[str]:
        """移除心跳过期（staleness > backend_ttl）的后端，并让指向它们的会话失效"""
        now = self.now() if now is None else now
        with self._lock:
            removed = sorted(
                sid for sid, e in self._registry.items()
                if now - e.last_heartbeat > self.backend_ttl
            )
            for sid in removed:
                del self._registry[sid]
                self._pinned.pop(sid, None)
                self._p_routed.pop(sid, None)
            if removed:
                invalidated = self.sessions.invalidate_assigned(removed)
                logger.warning(f"移除失联后端: {removed}，失效会话 {invalidated} 个")
        return removed

    def evict_sessions(self, now: Optional[float] = None) -> int:
        now = self.now() if now is None else now
        with self._lock:
            evicted = evict_expired(self.sessions, now, self.session_ttl)
            if evicted:
                # 按剩余会话重算各端点的分配数
                self._pinned = self.sessions.assigned_counts()
            return evicted

    def backends(self, role: Optional[NodeRole] = None) -> List[BackendEntry]:
        with self._lock:
            entries = sorted(self._registry.values(), key=lambda e: e.server_id)
        if role is not None:
            entries = [e for e in entries if e.role == role]
        return entries

    # ============== 路由 ==============

    def handle_request(self, query: RouteQuery, now: Optional[float] = None) -> RouteReply:
        """
        单个路由查询

        Raises:
            NoCapacityException: 所需角色没有存活后端
        """
        now = self.now() if now is None else now
        started = time.perf_counter()
        with self._lock:
            self._requests += 1
            try:
                reply = self._route(query, now)
            except NoCapacityException:
                self._no_capacity += 1
                raise
            finally:
                self._latencies.append(time.perf_counter() - started)
        return reply

    def _route(self, query: RouteQuery, now: float) -> RouteReply:
        conv_hash = message_digest(query.conv_first_message)
        live = self._live(now)
        request = TurnRequest(
            conv_id=conv_hash,
            turn_index=query.turn_index,
            new_input_tokens=query.n_in,
            cached_context_tokens=query.n_ctx,
            target_output_tokens=query.n_out_est,
        )
        if query.turn_index == 1:
            self.qps.record(now)

        session = self.sessions.get(conv_hash)
        if session is not None and session.assigned_pd not in live:
            # 端点已失联：下一轮按 Turn 1 处理
            self._end_session(conv_hash)
            session = None

        if query.turn_index == 1 or session is None:
            return self._start_session(request, conv_hash, live, now)

        endpoint = live[session.assigned_pd]
        if endpoint.role == NodeRole.R:
            entry = session_update(self.sessions, conv_hash, now)
            return self._reply(endpoint, 0, entry, RouteTaken.R_LOCAL)

        decision = decide(
            request, self.qps.rate(now), self.policy, self.sessions, conv_hash, now, stride=self.stride
        )
        entry = self.sessions.get(conv_hash)
        if decision.target_role == NodeRole.D:
            return self._reply(endpoint, decision.x_used, entry, RouteTaken.D_LOCAL)

        prefill = self._pick_prefill(live)
        if prefill is None:
            # 回滚本轮的会话更新
            self.sessions.put(session)
            raise NoCapacityException(NodeRole.P.value)
        return self._reply(prefill, decision.x_used, entry, RouteTaken.P_PATH)

    def _start_session(self, request: TurnRequest, conv_hash: str, live: Dict[str, BackendEntry], now: float) -> RouteReply:
        """Turn 1（或会话丢失后的 Turn 2+）：选端点并新建会话"""
        miss = request.turn_index >= 2
        if miss:
            self._eviction_misses += 1

        endpoint = self._pick_endpoint(live)
        if endpoint is None:
            raise NoCapacityException(f"{NodeRole.D.value}/{NodeRole.R.value}")

        if endpoint.role == NodeRole.R:
            self._end_session(conv_hash)
            entry = session_update(self.sessions, conv_hash, now, endpoint.server_id)
            self._pinned[endpoint.server_id] += 1
            return self._reply(endpoint, 0, entry, RouteTaken.R_LOCAL, eviction_miss=miss)

        prefill = self._pick_prefill(live)
        if prefill is None:
            raise NoCapacityException(NodeRole.P.value)

        self._end_session(conv_hash)
        decision = decide(
            request, self.qps.rate(now), self.policy, self.sessions, conv_hash, now,
            assign_pd=lambda: endpoint.server_id, stride=self.stride,
        )
        self._pinned[endpoint.server_id] += 1
        entry = self.sessions.get(conv_hash)
        return self._reply(prefill, decision.x_used, entry, RouteTaken.P_PATH, eviction_miss=decision.eviction_miss)

    def _end_session(self, conv_hash: str):
        """删除会话并归还它占用的端点分配数"""
        old = self.sessions.get(conv_hash)
        if old is None:
            return
        self.sessions.remove(conv_hash)
        if old.assigned_pd and self._pinned[old.assigned_pd] > 0:
            self._pinned[old.assigned_pd] -= 1

    def _live(self, now: float) -> Dict[str, BackendEntry]:
        """心跳未过期的后端（清理线程还没跑到的也排除掉）"""
        return {
            sid: e for sid, e in self._registry.items()
            if now - e.last_heartbeat <= self.backend_ttl
        }

    def _pick_endpoint(self, live: Dict[str, BackendEntry]) -> Optional[BackendEntry]:
        """R 在前、D 在后，取已分配会话最少者，平局取先出现者"""
        candidates = sorted(
            (e for e in live.values() if e.role in (NodeRole.R, NodeRole.D)),
            key=lambda e: (e.role != NodeRole.R, e.server_id),
        )
        best = None
        for e in candidates:
            if best is None or self._pinned[e.server_id] < self._pinned[best.server_id]:
                best = e
        return best

    def _pick_prefill(self, live: Dict[str, BackendEntry]) -> Optional[BackendEntry]:
        pool = sorted((e for e in live.values() if e.role == NodeRole.P), key=lambda e: e.server_id)
        if not pool:
            return None
        chosen = min(pool, key=lambda e: self._p_routed[e.server_id])
        self._p_routed[chosen.server_id] += 1
        return chosen

    def _reply(
        self,
        target: BackendEntry,
        x_used: int,
        entry: Optional[SessionEntry],
        route: RouteTaken,
        eviction_miss: bool = False,
    ) -> RouteReply:
        self._route_counts[route.value] += 1
        state = SessionState(turn_count=entry.turn_count, assigned_pd=entry.assigned_pd) if entry else None
        return RouteReply(
            target_address=target.address,
            server_id=target.server_id,
            target_role=target.role,
            x_used=x_used,
            eviction_miss=eviction_miss,
            session_state=state,
        )

    # ============== 统计 ==============

    def stats(self, now: Optional[float] = None) -> Stats:
        now = self.now() if now is None else now
        with self._lock:
            p99 = percentile_nearest_rank(list(self._latencies), 99.0)
            live = self._live(now)
            return Stats(
                requests=self._requests,
                route_counts={r.value: self._route_counts[r.value] for r in RouteTaken},
                eviction_misses=self._eviction_misses,
                no_capacity=self._no_capacity,
                protocol_errors=self._protocol_errors,
                decision_p99_ms=(p99 or 0.0) * 1000.0,
                sessions=len(self.sessions),
                backends={r.value: sum(1 for e in live.values() if e.role == r) for r in NodeRole},
            )

    # ============== 帧消息分发 ==============

    def dispatch(self, message: Any, now: Optional[float] = None) -> Optional[Dict[str, Any]]:
        """
        处理一条帧消息，返回要写回的回复（心跳不回复）
        错误都转成显式回复，不向传输层抛出
        """
        try:
            if not isinstance(message, dict):
                raise ProtocolException("消息必须是 JSON 对象")
            kind = message.get("kind")
            if kind == "route_query":
                query = RouteQuery.model_validate(message)
                return self.handle_request(query, now).model_dump(mode="json")
            if kind == "heartbeat":
                hb = Heartbeat.model_validate(message)
                self.register_heartbeat(hb.server_id, hb.role, hb.address, now)
                return None
            if kind == "stats":
                return self.stats(now).model_dump(mode="json")
            raise ProtocolException(f"未知的消息类型: {kind}")
        except (ValidationError, ProtocolException) as e:
            return self.protocol_error(str(e)).model_dump(mode="json")
        except NoCapacityException as e:
            return RouteReply(status="no_capacity", error=str(e)).model_dump(mode="json")

    def protocol_error(self, reason: str) -> RouteReply:
        with self._lock:
            self._protocol_errors += 1
        logger.warning(f"协议错误: {reason}")
        return RouteReply(status="protocol_error", error=reason)
