# app/services/simulator.py
"""
P/D/R 集群的离散事件仿真
- 事件引擎：(时刻, 序号) 小根堆，同一时刻按提交顺序执行，结果完全确定
- 服务通道：FIFO 队列 + 固定并发槽位，用于节点预填充和 KV 传输链路
- 解码：连续批处理，每个事件推进一次批迭代；新请求只在迭代边界加入
单次仿真严格单线程；多次仿真互不共享状态，由实验模块并行调度
"""

import heapq
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.schemas.calibration import BatchState, CalibrationTable, PrefillKind
from app.schemas.cluster import ClusterConfig
from app.schemas.metrics import (
    LinkStats,
    RequestRecord,
    RequestStatus,
    RouteTaken,
    SimResult,
)
from app.schemas.routing import DynamicPolicy, NodeRole, RoutingPolicy, StaticPolicy
from app.schemas.workload import Conversation, TurnRequest
from app.services.cost_model import (
    append_prefill_time,
    calibration_hash,
    decode_step_time,
    full_prefill_time,
    kv_payload_bytes,
    kv_service_time,
)
from app.services.exceptions import ConfigurationException, ServiceException, ValidationException
from app.services.routing_service import (
    QpsEstimator,
    SessionTable,
    decide,
    make_stride,
    session_update,
)

logger = logging.getLogger(__name__)

# 链路排队时延直方图的分箱（秒）
QUEUE_DELAY_EDGES = [0.0, 0.001, 0.01, 0.1, 1.0, 10.0, 1e9]


# ============== 事件引擎 ==============

class EventEngine:
    """小根堆事件循环"""

    def __init__(self):
        self.now = 0.0
        self.processed = 0
        self._heap: List[Tuple[float, int, Callable, tuple]] = []
        self._seq = itertools.count()

    def schedule(self, t: float, handler: Callable, *args):
        if t < self.now:
            raise ServiceException(f"事件时刻 {t} 早于当前时刻 {self.now}")
        heapq.heappush(self._heap, (t, next(self._seq), handler, args))

    def run(self) -> float:
        while self._heap:
            t, _, handler, args = heapq.heappop(self._heap)
            self.now = t
            self.processed += 1
            handler(*args)
        return self.now


# ============== 服务通道 ==============

@dataclass(eq=False, slots=True)
class LaneJob:
    service: float
    on_done: Optional[Callable[["LaneJob"], None]] = None
    kind: Optional[PrefillKind] = None
    interference_tokens: int = 0
    owner: Any = None
    enqueued: float = 0.0
    started: Optional[float] = None
    cancelled: bool = False


class ServiceLane:
    """FIFO 队列 + slots 个并发服务槽位；取消的作业立即释放槽位"""

    def __init__(self, engine: EventEngine, name: str, slots: int = 1):
        self.engine = engine
        self.name = name
        self.slots = slots
        self.queue: Deque[LaneJob] = deque()
        self.running: List[LaneJob] = []
        self.waits: List[float] = []
        self.busy_time = 0.0
        self._queued = 0

    @property
    def depth(self) -> int:
        """排队 + 正在服务的作业数"""
        return self._queued + len(self.running)

    def submit(self, job: LaneJob):
        job.enqueued = self.engine.now
        self.queue.append(job)
        self._queued += 1
        self._dispatch()

    def _dispatch(self):
        while len(self.running) < self.slots and self.queue:
            job = self.queue.popleft()
            if job.cancelled:
                continue
            self._queued -= 1
            now = self.engine.now
            job.started = now
            self.waits.append(now - job.enqueued)
            self.running.append(job)
            self.engine.schedule(now + job.service, self._finish, job)

    def _finish(self, job: LaneJob):
        if job.cancelled:
            return
        self.running.remove(job)
        self.busy_time += job.service
        self._dispatch()
        if job.on_done is not None:
            job.on_done(job)

    def cancel(self, job: LaneJob):
        if job.cancelled:
            return
        job.cancelled = True
        if job.started is None:
            self._queued -= 1
        elif job in self.running:
            self.running.remove(job)
            self.busy_time += self.engine.now - job.started
            self._dispatch()


def simulate_single_queue(arrival_times: Sequence[float], service_times: Sequence[float]) -> List[float]:
    """
    单服务台 FIFO 队列，返回每个作业的排队等待时间
    与 P 节点使用同一个事件引擎和服务通道（M/M/1 校验用）
    """
    if len(arrival_times) != len(service_times):
        raise ValidationException("到达时刻与服务时间数量不一致")
    engine = EventEngine()
    lane = ServiceLane(engine, "single", slots=1)
    jobs = []
    for a, s in zip(arrival_times, service_times):
        job = LaneJob(service=float(s))
        jobs.append(job)
        engine.schedule(float(a), lane.submit, job)
    engine.run()
    return [job.started - job.enqueued for job in jobs]


# ============== 节点与解码循环 ==============

_FIRST, _LAST = 0, 1


@dataclass(eq=False, slots=True)
class DecodeJob:
    owner: Any
    target: int
    join_iter: Optional[int] = None
    cancelled: bool = False


@dataclass(slots=True)
class DecodeIteration:
    """一次解码迭代的结果"""
    time: float
    tokens_emitted: int
    first_tokens: List[DecodeJob] = field(default_factory=list)
    completed: List[DecodeJob] = field(default_factory=list)


class Node:
    """
    集群节点
    P 只有预填充通道；D/R 还带解码批次和前缀缓存
    """

    def __init__(
        self,
        node_id: str,
        role: NodeRole,
        index: int,
        engine: EventEngine,
        calib: CalibrationTable,
        prefill_slots: int = 1,
        max_batch: int = 128,
    ):
        self.node_id = node_id
        self.role = role
        self.index = index
        self.engine = engine
        self.calib = calib
        self.max_batch = max_batch
        self.prefill = ServiceLane(engine, node_id, prefill_slots)
        self.prefix_cache: Dict[str, int] = {}
        self.waiting: Deque[DecodeJob] = deque()
        self.active = 0
        self.iteration = 0
        self.iterating = False
        self.pinned = 0
        self.decode_busy = 0.0
        self.tokens_emitted = 0
        self._pending: List[Tuple[int, int, int, DecodeJob]] = []
        self._seq = itertools.count()
        self.on_first_token: Callable[[DecodeJob], None] = lambda job: None
        self.on_complete: Callable[[DecodeJob], None] = lambda job: None

    def __repr__(self) -> str:
        return f"<Node {self.node_id} batch={self.active} prefill_depth={self.prefill.depth}>"

    def batch_state(self) -> BatchState:
        full = append = full_ops = append_ops = 0
        for job in self.prefill.running:
            if job.kind is PrefillKind.FULL:
                full += job.interference_tokens
                full_ops += 1
            else:
                append += job.interference_tokens
                append_ops += 1
        return BatchState(
            decode_batch_size=self.active,
            colocated_full_prefill_tokens=full,
            colocated_append_prefill_tokens=append,
            concurrent_prefill_ops=full_ops + append_ops,
            full_prefill_ops=full_ops,
            append_prefill_ops=append_ops,
        )

    def admit(self, job: DecodeJob):
        """进入等待队列，下一个迭代边界加入批次"""
        if self.role is NodeRole.P:
            raise ConfigurationException(f"P 节点 {self.node_id} 不能解码")
        self.waiting.append(job)
        self.try_start()

    def try_start(self):
        if self.iterating:
            return
        while self.waiting and self.active < self.max_batch:
            job = self.waiting.popleft()
            if job.cancelled:
                continue
            job.join_iter = self.iteration
            self.active += 1
            heapq.heappush(self._pending, (self.iteration + 1, next(self._seq), _FIRST, job))
            heapq.heappush(self._pending, (self.iteration + job.target, next(self._seq), _LAST, job))
        if self.active == 0:
            return
        step = decode_step_time(self.batch_state(), self.calib)
        self.iterating = True
        self.decode_busy += step
        self.engine.schedule(self.engine.now + step, self._end_iteration)

    def _end_iteration(self):
        self.iterating = False
        result = decode_loop_advance(self, self.engine.now)
        for job in result.first_tokens:
            self.on_first_token(job)
        for job in result.completed:
            self.on_complete(job)
        self.try_start()

    def cancel_decode(self, job: DecodeJob):
        if job.cancelled:
            return
        job.cancelled = True
        if job.join_iter is not None:
            self.active -= 1

    def emitted(self, job: DecodeJob) -> int:
        if job.join_iter is None:
            return 0
        return min(self.iteration - job.join_iter, job.target)


def decode_loop_advance(node: Node, now: float) -> DecodeIteration:
    """
    完成一次解码迭代：批内每个请求各产生一个 token，
    产生首 token 的与达到目标长度的请求分别返回（完成的请求离开批次）
    """
    node.iteration += 1
    result = DecodeIteration(time=now, tokens_emitted=node.active)
    pending = node._pending
    while pending and pending[0][0] <= node.iteration:
        _, _, kind, job = heapq.heappop(pending)
        if job.cancelled:
            continue
        if kind == _FIRST:
            result.first_tokens.append(job)
        else:
            node.active -= 1
            result.completed.append(job)
    node.tokens_emitted += result.tokens_emitted
    return result


# ============== 集群 ==============

def make_config(name: str, calib: CalibrationTable, routing: Optional[RoutingPolicy] = None, **kwargs) -> ClusterConfig:
    """按命名配置构造 ClusterConfig；未知名称抛出 ConfigurationException"""
    try:
        return ClusterConfig.from_name(name, calib, routing=routing, **kwargs)
    except ValueError as e:
        raise ConfigurationException(str(e))


class Cluster:
    """按配置实例化的节点集合（只能运行一次仿真）"""

    def __init__(self, config: ClusterConfig):
        self.config = config
        self.calib = config.calib
        self.engine = EventEngine()

        def nodes(role: NodeRole, count: int) -> List[Node]:
            return [
                Node(f"{role.value}{i}", role, i, self.engine, self.calib, config.prefill_slots, config.max_decode_batch)
                for i in range(count)
            ]

        self.p_nodes = nodes(NodeRole.P, config.p_nodes)
        self.d_nodes = nodes(NodeRole.D, config.d_nodes)
        self.r_nodes = nodes(NodeRole.R, config.r_nodes)
        # 对话落点：R 在前，D 在后
        self.endpoints = self.r_nodes + self.d_nodes
        self.links: Dict[Any, ServiceLane] = {}
        self.sessions = SessionTable()
        self.stride = make_stride(config.routing)
        self.qps = QpsEstimator()
        self.used = False

    @property
    def all_nodes(self) -> List[Node]:
        return self.p_nodes + self.d_nodes + self.r_nodes

    def link(self, src: Node, dst: Node) -> ServiceLane:
        """共享链路，或按 (P, D) 节点对各一条"""
        key = None if self.calib.link_topology == "shared" else (src.node_id, dst.node_id)
        lane = self.links.get(key)
        if lane is None:
            lane = ServiceLane(self.engine, "link" if key is None else f"link-{src.node_id}-{dst.node_id}")
            self.links[key] = lane
        return lane


def build_cluster(config: ClusterConfig) -> Cluster:
    """校验路由策略与节点角色是否匹配，并实例化空集群"""
    routing = config.routing
    wants_d = isinstance(routing, DynamicPolicy) or (isinstance(routing, StaticPolicy) and routing.x > 0)
    if wants_d and config.d_nodes == 0:
        raise ConfigurationException(f"{config.name}: x>0 需要 D 节点")
    if config.d_nodes > 0 and config.p_nodes == 0:
        raise ConfigurationException(f"{config.name}: D 节点需要 P 节点完成 Turn 1 预填充")
    if config.p_nodes > 0 and config.d_nodes == 0:
        raise ConfigurationException(f"{config.name}: P 节点没有可用的 D 节点")
    return Cluster(config)


# ============== 仿真 ==============

@dataclass(eq=False, slots=True)
class _ConvState:
    conv: Conversation
    endpoint: Optional[Node] = None


@dataclass(eq=False, slots=True)
class _Request:
    state: _ConvState
    turn: TurnRequest
    arrival: float
    route: RouteTaken = RouteTaken.P_PATH
    node: Optional[Node] = None
    stage: Optional[Tuple[Any, Any]] = None
    first_token: Optional[float] = None
    done: bool = False


class Simulation:
    """一次仿真运行的事件处理"""

    def __init__(self, cluster: Cluster, conversations: Sequence[Conversation], qps_replay: float, seed: int, think_time: float = 0.0):
        self.cluster = cluster
        self.config = cluster.config
        self.engine = cluster.engine
        self.calib = cluster.calib
        self.conversations = conversations
        self.qps_replay = qps_replay
        self.seed = seed
        self.think_time = think_time
        self.records: List[RequestRecord] = []
        self.transfers_by_conversation: Dict[str, int] = {}
        self.transfers = 0
        self.bytes_moved = 0
        self.abandoned_turns = 0
        # 最后一个请求结束（完成或超时）的时刻；之后只剩已失效的超时事件
        self.last_event = 0.0
        cluster.qps.prior = qps_replay
        for node in cluster.d_nodes + cluster.r_nodes:
            node.on_first_token = self._on_first_token
            node.on_complete = self._on_complete

    # ---------- 到达与路由 ----------

    def _pick_endpoint(self) -> Node:
        best = self.cluster.endpoints[0]
        for node in self.cluster.endpoints[1:]:
            if node.pinned < best.pinned:
                best = node
        return best

    def _pick_p(self) -> Node:
        return min(self.cluster.p_nodes, key=lambda n: (n.prefill.depth, n.index))

    def _arrive(self, state: _ConvState, turn_index: int):
        now = self.engine.now
        conv = state.conv
        turn = conv.turns[turn_index - 1]
        req = _Request(state=state, turn=turn, arrival=now)
        self.engine.schedule(now + self.config.request_timeout, self._timeout, req)

        if turn_index == 1:
            self.cluster.qps.record(now)
            state.endpoint = self._pick_endpoint()
            state.endpoint.pinned += 1
        endpoint = state.endpoint
        req.node = endpoint

        if endpoint.role is NodeRole.R:
            session_update(self.cluster.sessions, conv.first_message_digest, now, endpoint.node_id)
            req.route = RouteTaken.R_LOCAL
            if turn_index == 1:
                self._full_prefill(endpoint, req, turn.new_input_tokens, then=self._to_decode)
            else:
                self._append_prefill(endpoint, req)
            return

        policy = self.config.routing
        measured = self.cluster.qps.rate(now) if isinstance(policy, DynamicPolicy) else self.qps_replay
        decision = decide(
            turn,
            measured,
            policy,
            self.cluster.sessions,
            conv.first_message_digest,
            now,
            assign_pd=lambda: endpoint.node_id,
            stride=self.cluster.stride,
        )
        if decision.target_role is NodeRole.D:
            req.route = RouteTaken.D_LOCAL
            self._append_prefill(endpoint, req)
        else:
            req.route = RouteTaken.P_PATH
            # P 上没有缓存：重算整个历史
            tokens = turn.cached_context_tokens + turn.new_input_tokens
            p_node = self._pick_p()
            self._full_prefill(p_node, req, tokens, then=lambda r: self._transfer(r, p_node))

    def _full_prefill(self, node: Node, req: _Request, tokens: int, then: Callable[[_Request], None]):
        job = LaneJob(
            service=full_prefill_time(tokens, self.calib),
            on_done=lambda j: then(req),
            kind=PrefillKind.FULL,
            interference_tokens=tokens,
            owner=req,
        )
        req.stage = (node.prefill, job)
        node.prefill.submit(job)

    def _append_prefill(self, node: Node, req: _Request):
        turn = req.turn
        cached = min(node.prefix_cache.get(turn.conv_id, 0), turn.cached_context_tokens)
        missing = turn.cached_context_tokens - cached
        job = LaneJob(
            service=append_prefill_time(turn.new_input_tokens + missing, cached, self.calib),
            on_done=lambda j: self._to_decode(req),
            kind=PrefillKind.APPEND,
            interference_tokens=turn.cached_context_tokens + turn.new_input_tokens,
            owner=req,
        )
        req.stage = (node.prefill, job)
        node.prefill.submit(job)

    def _transfer(self, req: _Request, src: Node):
        turn = req.turn
        tokens = turn.cached_context_tokens + turn.new_input_tokens
        lane = self.cluster.link(src, req.node)
        job = LaneJob(service=kv_service_time(tokens, self.calib), on_done=lambda j: self._to_decode(req), owner=req)
        self.transfers += 1
        self.bytes_moved += kv_payload_bytes(tokens, self.calib)
        self.transfers_by_conversation[turn.conv_id] = self.transfers_by_conversation.get(turn.conv_id, 0) + 1
        req.stage = (lane, job)
        lane.submit(job)

    def _to_decode(self, req: _Request):
        job = DecodeJob(owner=req, target=req.turn.target_output_tokens)
        req.stage = (req.node, job)
        req.node.admit(job)

    # ---------- 完成与超时 ----------

    def _on_first_token(self, job: DecodeJob):
        job.owner.first_token = self.engine.now

    def _on_complete(self, job: DecodeJob):
        req: _Request = job.owner
        now = self.engine.now
        turn = req.turn
        req.done = True
        req.node.prefix_cache[turn.conv_id] = turn.history_tokens
        self._record(req, RequestStatus.COMPLETED, completion=now, emitted=turn.target_output_tokens)

        conv = req.state.conv
        if turn.turn_index < conv.num_turns:
            self.engine.schedule(now + self.think_time, self._arrive, req.state, turn.turn_index + 1)
        else:
            req.node.pinned -= 1

    def _timeout(self, req: _Request):
        if req.done:
            return
        req.done = True
        emitted = 0
        if req.stage is not None:
            holder, job = req.stage
            if isinstance(job, DecodeJob):
                emitted = holder.emitted(job)
                holder.cancel_decode(job)
            else:
                holder.cancel(job)
        self._record(req, RequestStatus.TIMED_OUT, completion=None, emitted=emitted)

        # 失败后对话不再继续
        remaining = req.state.conv.num_turns - req.turn.turn_index
        self.abandoned_turns += remaining
        req.node.pinned -= 1
        logger.debug(f"请求超时 {req.turn.conv_id}#{req.turn.turn_index}，放弃剩余 {remaining} 轮")

    def _record(self, req: _Request, status: RequestStatus, completion: Optional[float], emitted: int):
        turn = req.turn
        self.last_event = self.engine.now
        self.records.append(RequestRecord(
            conv_id=turn.conv_id,
            turn_index=turn.turn_index,
            arrival=req.arrival,
            first_token=req.first_token,
            completion=completion,
            output_tokens_emitted=emitted,
            route_taken=req.route,
            status=status,
            node=req.node.node_id if req.node else None,
            input_tokens=turn.new_input_tokens,
            context_tokens=turn.cached_context_tokens,
        ))

    # ---------- 运行 ----------

    def run(self) -> SimResult:
        for conv in self.conversations:
            t = conv.turns[0].arrival_time
            if t is None:
                raise ValidationException(f"对话 {conv.conv_id} 的 Turn 1 没有到达时刻")
            self.engine.schedule(t, self._arrive, _ConvState(conv=conv), 1)

        label = self.config.label
        logger.info(f"仿真开始: {label}, seed={self.seed}, 对话 {len(self.conversations)} 个")
        self.engine.run()
        makespan = self.last_event

        self.records.sort(key=lambda r: (r.arrival, r.conv_id, r.turn_index))
        completed = sum(1 for r in self.records if r.status == RequestStatus.COMPLETED)
        logger.info(
            f"仿真结束: {label}, 请求 {len(self.records)} 个, 完成 {completed} 个, "
            f"KV 传输 {self.transfers} 次, 事件 {self.engine.processed} 个"
        )
        return SimResult(
            records=self.records,
            link_stats=self._link_stats(),
            utilization=self._utilization(makespan),
            transfers_by_conversation=self.transfers_by_conversation,
            makespan=makespan,
            manifest={
                "config": label,
                "seed": self.seed,
                "qps": self.qps_replay,
                "conversations": len(self.conversations),
                "abandoned_turns": self.abandoned_turns,
                "calibration_hash": calibration_hash(self.calib),
            },
        )

    def _link_stats(self) -> LinkStats:
        waits = [w for lane in self.cluster.links.values() for w in lane.waits]
        counts, edges = np.histogram(np.asarray(waits, dtype=float), bins=QUEUE_DELAY_EDGES)
        return LinkStats(
            transfers=self.transfers,
            bytes_moved=self.bytes_moved,
            busy_time=sum(lane.busy_time for lane in self.cluster.links.values()),
            queue_delay_edges=[float(e) for e in edges],
            queue_delay_counts=[int(c) for c in counts],
        )

    def _utilization(self, makespan: float) -> Dict[str, Dict[str, float]]:
        if makespan <= 0:
            return {}
        return {
            node.node_id: {
                "prefill": node.prefill.busy_time / makespan,
                "decode": node.decode_busy / makespan,
            }
            for node in self.cluster.all_nodes
        }


def run_simulation(
    cluster: Cluster,
    conversations: Sequence[Conversation],
    qps_replay: float,
    seed: int,
    think_time: float = 0.0,
) -> SimResult:
    """
    在集群上执行负载直到所有请求完成或超时

    Args:
        cluster: build_cluster 的结果（每个实例只能运行一次）
        conversations: 已设定 Turn 1 到达时刻的对话
        qps_replay: 负载到达率（动态路由的 QPS 估计在观测不足时使用）
        seed: 随机种子（写入 manifest）
        think_time: 上一轮完成到下一轮到达的间隔
    """
    if cluster.used:
        raise ConfigurationException("集群实例已经运行过，请重新 build_cluster")
    cluster.used = True
    return Simulation(cluster, conversations, qps_replay, seed, think_time).run()
