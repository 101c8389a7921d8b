# app/services/workload_service.py
"""
负载服务：合成多轮对话负载、导入/导出真实轨迹
所有函数在给定 (输入, seed) 时都是纯函数，每次调用使用独立的随机数发生器，
可以在并行的实验 worker 中直接调用
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, IO, Iterable, List, Optional, Union

import numpy as np
import yaml
from pydantic import ValidationError

from app.schemas.workload import (
    Conversation,
    TraceFilter,
    TraceRecord,
    TurnProfile,
    TurnRequest,
    WorkloadCategory,
    WorkloadSpec,
    classify_ratio,
)
from app.services.exceptions import (
    EmptyResultException,
    TraceFormatException,
    ValidationException,
)

logger = logging.getLogger(__name__)


def message_digest(text: str) -> str:
    """首条用户消息的 MD5 摘要（会话表的键）"""
    return hashlib.md5(text.encode("utf-8")).hexdigest()


# ============== 到达过程 ==============

def arrival_schedule(qps: float, duration: float, seed: int) -> List[float]:
    """
    泊松到达时刻：指数间隔累加，落在 [0, duration) 内，严格递增

    Args:
        qps: 到达率（对话/秒）
        duration: 窗口长度（秒），0 返回空列表
        seed: 随机种子
    """
    if qps <= 0:
        raise ValidationException(f"qps 必须大于 0, 实际 {qps}")
    if duration < 0:
        raise ValidationException(f"duration 不能为负, 实际 {duration}")
    if duration == 0:
        return []

    rng = np.random.default_rng(seed)
    scale = 1.0 / qps
    chunk = max(16, int(qps * duration * 1.2) + 16)
    times: List[float] = []
    t = 0.0
    while True:
        points = t + np.cumsum(rng.exponential(scale, size=chunk))
        inside = points[points < duration]
        times.extend(float(p) for p in inside)
        if len(inside) < chunk:
            break
        t = float(points[-1])
    return times


# ============== 合成负载 ==============

def _jittered(value: int, jitter_pct: float, rng: Optional[np.random.Generator]) -> int:
    if rng is None or jitter_pct == 0:
        return value
    factor = 1.0 + rng.uniform(-jitter_pct, jitter_pct) / 100.0
    return max(1, int(round(value * factor)))


def build_conversation(
    conv_id: str,
    digest: str,
    profiles: List[TurnProfile],
    arrival_time: Optional[float] = None,
) -> Conversation:
    """按每轮 (输入, 输出) 构造对话，cached_context 取之前各轮之和"""
    turns: List[TurnRequest] = []
    context = 0
    for index, profile in enumerate(profiles, start=1):
        turns.append(TurnRequest(
            conv_id=conv_id,
            turn_index=index,
            new_input_tokens=profile.input_tokens,
            cached_context_tokens=context,
            target_output_tokens=profile.output_tokens,
            arrival_time=arrival_time if index == 1 else None,
        ))
        context += profile.input_tokens + profile.output_tokens
    return Conversation(conv_id=conv_id, first_message_digest=digest, turns=turns)


def generate_conversations(spec: WorkloadSpec, seed: int) -> List[Conversation]:
    """
    生成合成多轮对话

    Turn 1 到达时刻来自 arrival_schedule；Turn 2+ 的到达时刻由仿真在上一轮完成时确定
    """
    arrivals = arrival_schedule(spec.qps, spec.duration, seed)
    jitter_rng = np.random.default_rng([seed, 1]) if spec.jitter_pct > 0 else None

    conversations = []
    for i, t in enumerate(arrivals):
        conv_id = f"{spec.workload_id}-{i:06d}"
        profiles = []
        for turn_index in range(1, spec.num_turns + 1):
            base = spec.turn1 if turn_index == 1 else spec.turn2plus
            profiles.append(TurnProfile(
                input=_jittered(base.input_tokens, spec.jitter_pct, jitter_rng),
                output=_jittered(base.output_tokens, spec.jitter_pct, jitter_rng),
            ))
        digest = message_digest(f"{spec.workload_id}:{seed}:{i}")
        conversations.append(build_conversation(conv_id, digest, profiles, arrival_time=t))

    logger.debug(f"生成负载 {spec.workload_id}: {len(conversations)} 个对话 (qps={spec.qps}, seed={seed})")
    return conversations


def assign_arrivals(conversations: List[Conversation], qps: float, seed: int) -> List[Conversation]:
    """按目标到达率为导入的对话重新分配 Turn 1 到达时刻（保持原顺序）"""
    if qps <= 0:
        raise ValidationException(f"qps 必须大于 0, 实际 {qps}")
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / qps, size=len(conversations)))

    replayed = []
    for conv, t in zip(conversations, arrivals):
        turns = [
            turn.model_copy(update={"arrival_time": float(t) if turn.turn_index == 1 else None})
            for turn in conv.turns
        ]
        replayed.append(conv.model_copy(update={"turns": turns}))
    return replayed


# ============== 轨迹导入/导出 ==============

def _turn2plus_category(record: TraceRecord) -> Optional[WorkloadCategory]:
    later = record.turns[1:]
    if not later:
        return None
    total_in = sum(t.input_tokens for t in later)
    total_out = sum(t.output_tokens for t in later)
    return classify_ratio(total_in, total_out)


def _iter_lines(source: Union[bytes, str, IO, Iterable]) -> Iterable[str]:
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        return source.splitlines()
    return source


def ingest_trace(source: Union[bytes, str, IO, Iterable], trace_filter: Optional[TraceFilter] = None) -> List[Conversation]:
    """
    导入轨迹文件（每行一个对话），返回过滤后的对话（不含到达时刻）

    Raises:
        TraceFormatException: 某行格式错误（带行号）
        EmptyResultException: 过滤后没有对话
    """
    trace_filter = trace_filter or TraceFilter()
    records: List[TraceRecord] = []

    for line_no, line in enumerate(_iter_lines(source), start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        line = line.strip()
        if not line:
            continue
        try:
            record = TraceRecord.model_validate(json.loads(line))
        except json.JSONDecodeError as e:
            raise TraceFormatException(line_no, f"不是合法 JSON ({e.msg})")
        except ValidationError as e:
            raise TraceFormatException(line_no, str(e.errors()[0]["msg"]))
        if not record.turns:
            raise TraceFormatException(line_no, "turns 不能为空")
        records.append(record)

    total = len(records)
    records = [r for r in records if len(r.turns) >= trace_filter.min_turns]
    if trace_filter.prefill_heavy_only:
        records = [r for r in records if _turn2plus_category(r) == WorkloadCategory.PREFILL_HEAVY]

    if trace_filter.sample_size is not None:
        if trace_filter.sample_size < len(records):
            rng = np.random.default_rng(trace_filter.seed)
            picked = sorted(rng.choice(len(records), size=trace_filter.sample_size, replace=False))
            records = [records[i] for i in picked]
        else:
            logger.warning(f"采样数 {trace_filter.sample_size} 不小于可用对话数 {len(records)}，全部保留")

    if not records:
        raise EmptyResultException(f"轨迹过滤后没有剩余对话（原始 {total} 个）")

    conversations = []
    for r in records:
        digest = r.first_message_digest or message_digest(r.first_message or r.conv_id)
        profiles = [TurnProfile(input=t.input_tokens, output=t.output_tokens) for t in r.turns]
        conversations.append(build_conversation(r.conv_id, digest, profiles))

    logger.info(f"导入轨迹: {total} 个对话，保留 {len(conversations)} 个")
    return conversations


def export_trace(conversations: List[Conversation]) -> bytes:
    """导出为轨迹文件格式（到达时刻不属于轨迹格式）"""
    lines = []
    for conv in conversations:
        lines.append(json.dumps({
            "conv_id": conv.conv_id,
            "first_message_digest": conv.first_message_digest,
            "turns": [
                {"input_tokens": t.new_input_tokens, "output_tokens": t.target_output_tokens}
                for t in conv.turns
            ],
        }, ensure_ascii=False))
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


# ============== 负载文件与默认目录 ==============

def load_workload_spec(path: Union[str, Path]) -> WorkloadSpec:
    """从 YAML 负载文件加载（未知字段拒绝）"""
    path = Path(path)
    if not path.exists():
        raise ValidationException(f"负载文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
        if "workload_id" not in raw:
            raw["workload_id"] = path.stem
        return WorkloadSpec.model_validate(raw)
    except ValidationError as e:
        raise ValidationException(f"负载文件校验失败 {path}: {e}")
    except yaml.YAMLError as e:
        raise ValidationException(f"负载文件不是合法 YAML {path}: {e}")


# Turn 1 档位：短上下文与长上下文
TURN1_PROFILES: Dict[str, TurnProfile] = {
    "t1short": TurnProfile(input=256, output=128),
    "t1long": TurnProfile(input=2048, output=128),
}

# Turn 2+ 档位：4 个解码为主、2 个均衡、3 个预填充为主（标定选择，不是实测值）
TURN2_PROFILES: Dict[str, TurnProfile] = {
    "dec1": TurnProfile(input=32, output=256),
    "dec2": TurnProfile(input=64, output=512),
    "dec3": TurnProfile(input=128, output=384),
    "dec4": TurnProfile(input=200, output=500),
    "bal1": TurnProfile(input=256, output=256),
    "bal2": TurnProfile(input=512, output=384),
    "pre1": TurnProfile(input=1024, output=128),
    "pre2": TurnProfile(input=2048, output=256),
    "pre3": TurnProfile(input=4096, output=128),
}


def workload_catalog(qps: float = 1.0, duration: float = 10.0, num_turns: int = 2) -> Dict[str, WorkloadSpec]:
    """默认的 18 个合成负载（2 个 Turn 1 档位 × 9 个 Turn 2+ 档位）"""
    catalog = {}
    for t1_name, t1 in TURN1_PROFILES.items():
        for t2_name, t2 in TURN2_PROFILES.items():
            workload_id = f"{t1_name}_{t2_name}"
            catalog[workload_id] = WorkloadSpec(
                workload_id=workload_id,
                turn1=t1,
                turn2plus=t2,
                num_turns=num_turns,
                qps=qps,
                duration_s=duration,
            )
    return catalog
