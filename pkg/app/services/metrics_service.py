# app/services/metrics_service.py
"""
指标服务：单请求指标、聚合、Pareto 前沿、胜者分布、失败率
全部是基于不可变记录列表的纯函数
"""

import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from app.schemas.metrics import (
    DEGRADED_THRESHOLD,
    AggregateMetrics,
    RequestMetrics,
    RequestRecord,
    RequestStatus,
    RouteTaken,
)
from app.services.exceptions import EmptyResultException, TraceFormatException, ValidationException

logger = logging.getLogger(__name__)

# 聚合结果导出的列（顺序固定）
AGGREGATE_COLUMNS = [
    "config", "x_mode", "workload_id", "qps",
    "ttft_t1_mean", "ttft_t1_p99", "ttft_t2_mean", "ttft_t2_p99",
    "tpot_mean", "latency_mean", "tps", "success_rate", "degraded",
]

# 胜者分布的配置类别（行顺序）
CATEGORY_ROWS = ["Replica", "x=0", "0<x<1", "x=1", "hybrid", "PPD"]

OBJECTIVES = ("ttft", "tpot", "throughput")


# ============== 单请求与聚合 ==============

def per_request(record: RequestRecord) -> RequestMetrics:
    """
    ttft = 首 token − 到达；tpot = (完成 − 首 token) / (token 数 − 1)；latency = 完成 − 到达
    超时请求只给出 success=false
    """
    if record.status != RequestStatus.COMPLETED:
        return RequestMetrics(success=False)
    tpot = None
    if record.output_tokens_emitted >= 2:
        tpot = (record.completion - record.first_token) / (record.output_tokens_emitted - 1)
    return RequestMetrics(
        ttft=record.first_token - record.arrival,
        tpot=tpot,
        latency=record.completion - record.arrival,
        success=True,
    )


def percentile_nearest_rank(values: Sequence[float], pct: float = 99.0) -> Optional[float]:
    """最近秩百分位（不插值）"""
    if not values:
        return None
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def _mean(values: Sequence[float]) -> Optional[float]:
    if not values:
        return None
    return math.fsum(values) / len(values)


def aggregate(records: Sequence[RequestRecord], window: float) -> AggregateMetrics:
    """
    聚合一次运行的记录

    Args:
        records: 全部已发出请求的记录
        window: 吞吐量的时间窗口（秒）
    """
    if not records:
        raise ValidationException("没有请求记录可以聚合")
    if window <= 0:
        raise ValidationException(f"窗口长度必须大于 0: {window}")

    ttft_t1, ttft_t2, tpots, latencies = [], [], [], []
    tokens = 0
    completed = 0
    t2_total = t2_local = 0
    for r in records:
        if r.turn_index >= 2:
            t2_total += 1
            if r.route_taken == RouteTaken.D_LOCAL:
                t2_local += 1
        m = per_request(r)
        if not m.success:
            continue
        completed += 1
        tokens += r.output_tokens_emitted
        (ttft_t1 if r.turn_index == 1 else ttft_t2).append(m.ttft)
        latencies.append(m.latency)
        if m.tpot is not None:
            tpots.append(m.tpot)

    success_rate = completed / len(records)
    return AggregateMetrics(
        ttft_t1_mean=_mean(ttft_t1),
        ttft_t1_p99=percentile_nearest_rank(ttft_t1),
        ttft_t2plus_mean=_mean(ttft_t2),
        ttft_t2plus_p99=percentile_nearest_rank(ttft_t2),
        tpot_mean=_mean(tpots),
        latency_mean=_mean(latencies),
        tps=tokens / window,
        success_rate=success_rate,
        degraded=success_rate < DEGRADED_THRESHOLD,
        num_requests=len(records),
        num_completed=completed,
        d_local_ratio=(t2_local / t2_total) if t2_total else None,
    )


def mean_of_seeds(runs: Sequence[AggregateMetrics]) -> AggregateMetrics:
    """多个种子的均值（缺失值不参与平均）"""
    if not runs:
        raise ValidationException("没有可合并的运行结果")
    if len(runs) == 1:
        return runs[0]

    def avg(name: str) -> Optional[float]:
        values = [getattr(r, name) for r in runs if getattr(r, name) is not None]
        return _mean(values)

    success_rate = math.fsum(r.success_rate for r in runs) / len(runs)
    return AggregateMetrics(
        ttft_t1_mean=avg("ttft_t1_mean"),
        ttft_t1_p99=avg("ttft_t1_p99"),
        ttft_t2plus_mean=avg("ttft_t2plus_mean"),
        ttft_t2plus_p99=avg("ttft_t2plus_p99"),
        tpot_mean=avg("tpot_mean"),
        latency_mean=avg("latency_mean"),
        tps=math.fsum(r.tps for r in runs) / len(runs),
        success_rate=success_rate,
        degraded=success_rate < DEGRADED_THRESHOLD,
        num_requests=sum(r.num_requests for r in runs),
        num_completed=sum(r.num_completed for r in runs),
        d_local_ratio=avg("d_local_ratio"),
    )


# ============== 记录文件 ==============

def records_to_jsonl(records: Iterable[RequestRecord], manifest: Optional[Dict[str, Any]] = None) -> str:
    """记录文件：第一行为 manifest 记录，之后每行一个请求"""
    lines = []
    if manifest is not None:
        lines.append(json.dumps({"manifest": manifest}, sort_keys=True, ensure_ascii=False))
    for r in records:
        lines.append(json.dumps(r.model_dump(mode="json"), sort_keys=True, ensure_ascii=False))
    return "\n".join(lines) + "\n"


def records_from_jsonl(text: str) -> Tuple[Optional[Dict[str, Any]], List[RequestRecord]]:
    """读取记录文件，返回 (manifest, records)"""
    manifest = None
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            data = json.loads(line)
            if "manifest" in data and len(data) == 1:
                manifest = data["manifest"]
                continue
            records.append(RequestRecord.model_validate(data))
        except Exception as e:
            raise TraceFormatException(line_no, str(e))
    return manifest, records


# ============== 聚合表导出 ==============

def aggregate_row(config: str, x_mode: str, workload_id: str, qps: float, metrics: AggregateMetrics) -> Dict[str, Any]:
    return {
        "config": config,
        "x_mode": x_mode,
        "workload_id": workload_id,
        "qps": qps,
        "ttft_t1_mean": metrics.ttft_t1_mean,
        "ttft_t1_p99": metrics.ttft_t1_p99,
        "ttft_t2_mean": metrics.ttft_t2plus_mean,
        "ttft_t2_p99": metrics.ttft_t2plus_p99,
        "tpot_mean": metrics.tpot_mean,
        "latency_mean": metrics.latency_mean,
        "tps": metrics.tps,
        "success_rate": metrics.success_rate,
        "degraded": metrics.degraded,
    }


def aggregates_to_frame(rows: Iterable[Dict[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows), columns=AGGREGATE_COLUMNS)
    return frame.sort_values(["config", "workload_id", "qps"], kind="mergesort").reset_index(drop=True)


def write_csv(frame: pd.DataFrame, path: Union[str, Path], manifest: Dict[str, Any]) -> Path:
    """写 CSV，首行为 `# manifest: {...}` 注释"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("# manifest: " + json.dumps(manifest, sort_keys=True, ensure_ascii=False) + "\n")
        frame.to_csv(f, index=False, float_format="%.9g", lineterminator="\n")
    return path


def read_csv(path: Union[str, Path]) -> Tuple[Dict[str, Any], pd.DataFrame]:
    """读取带 manifest 注释行的 CSV"""
    path = Path(path)
    if not path.exists():
        raise ValidationException(f"结果文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    manifest = {}
    if first.startswith("# manifest: "):
        manifest = json.loads(first[len("# manifest: "):])
    return manifest, pd.read_csv(path, comment="#")


def results_from_frame(frame: pd.DataFrame) -> Dict[Tuple[str, float, str], AggregateMetrics]:
    """聚合表 -> (workload_id, qps, config) -> AggregateMetrics（分析命令从已有结果读入）"""
    missing = [c for c in AGGREGATE_COLUMNS if c not in frame.columns]
    if missing:
        raise ValidationException(f"结果表缺少列: {missing}")

    def value(v):
        return None if pd.isna(v) else float(v)

    results = {}
    for row in frame.to_dict("records"):
        results[(str(row["workload_id"]), float(row["qps"]), str(row["config"]))] = AggregateMetrics(
            ttft_t1_mean=value(row["ttft_t1_mean"]),
            ttft_t1_p99=value(row["ttft_t1_p99"]),
            ttft_t2plus_mean=value(row["ttft_t2_mean"]),
            ttft_t2plus_p99=value(row["ttft_t2_p99"]),
            tpot_mean=value(row["tpot_mean"]),
            latency_mean=value(row["latency_mean"]),
            tps=float(row["tps"]),
            success_rate=float(row["success_rate"]),
            degraded=float(row["success_rate"]) < DEGRADED_THRESHOLD,
        )
    return results


# ============== Pareto 前沿 ==============

def _dominates(a: Mapping[str, Any], b: Mapping[str, Any]) -> bool:
    not_worse = a["ttft_p99"] <= b["ttft_p99"] and a["tps"] >= b["tps"]
    strictly = a["ttft_p99"] < b["ttft_p99"] or a["tps"] > b["tps"]
    return not_worse and strictly


def pareto_frontier(points: Sequence[Mapping[str, Any]]) -> List[Mapping[str, Any]]:
    """
    非支配点集合（TTFT p99 越低越好、TPS 越高越好）
    重复点只保留一个；按 TPS 升序稳定排序
    """
    if not points:
        raise ValidationException("Pareto 前沿至少需要一个点")
    frontier: List[Mapping[str, Any]] = []
    seen = set()
    for p in points:
        if any(_dominates(q, p) for q in points):
            continue
        coord = (p["ttft_p99"], p["tps"])
        if coord in seen:
            continue
        seen.add(coord)
        frontier.append(p)
    return sorted(frontier, key=lambda p: p["tps"])


# ============== 胜者分布 ==============

def config_category(label: str) -> str:
    """
    配置标签归类：
    "4R" -> Replica；含 R 的混合形状 -> hybrid；动态路由 -> PPD；其余按 x 归入 x=0 / 0<x<1 / x=1
    """
    shape, _, suffix = label.partition("_x")
    if "R" in shape and ("P" in shape or "D" in shape):
        return "hybrid"
    if "P" not in shape and "D" not in shape:
        return "Replica"
    if label.endswith("_ppd"):
        return "PPD"
    if suffix == "0":
        return "x=0"
    if suffix == "1":
        return "x=1"
    return "0<x<1"


def _objective_value(metrics: AggregateMetrics, objective: str) -> Optional[float]:
    if objective == "ttft":
        return metrics.ttft_t2plus_mean
    if objective == "tpot":
        return metrics.tpot_mean
    return -metrics.tps


def winner_distribution(results: Mapping[Tuple[str, float, str], AggregateMetrics]) -> Dict[str, Any]:
    """
    每个 (workload, qps) 格子按三个目标各选一个胜者，统计各类别的获胜比例

    Args:
        results: (workload_id, qps, config_label) -> AggregateMetrics

    Returns:
        {"table": {类别: {ttft, tpot, throughput, avg}}, "cells", "excluded_cells", "disagreement"}
    """
    cells: Dict[Tuple[str, float], Dict[str, AggregateMetrics]] = defaultdict(dict)
    for (workload, qps, config), metrics in results.items():
        cells[(workload, qps)][config] = metrics

    wins = {cat: {obj: 0 for obj in OBJECTIVES} for cat in CATEGORY_ROWS}
    counted = excluded = disagree = 0
    for cell_key in sorted(cells):
        configs = cells[cell_key]
        if len(configs) < 2:
            raise ValidationException(f"格子 {cell_key} 只有 {len(configs)} 个配置")
        healthy = {name: m for name, m in configs.items() if not m.degraded}
        if not healthy:
            excluded += 1
            continue
        counted += 1
        winners = {}
        for obj in OBJECTIVES:
            candidates = [
                (value, name) for name, m in healthy.items()
                if (value := _objective_value(m, obj)) is not None
            ]
            if not candidates:
                continue
            # 同分时按配置名字典序
            winners[obj] = min(candidates)[1]
            wins[config_category(winners[obj])][obj] += 1
        if winners.get("ttft") != winners.get("tpot"):
            disagree += 1

    if counted == 0:
        raise EmptyResultException("所有格子的配置都已退化，无法统计胜者")

    table = {}
    for cat in CATEGORY_ROWS:
        row = {obj: 100.0 * wins[cat][obj] / counted for obj in OBJECTIVES}
        row["avg"] = math.fsum(row[obj] for obj in OBJECTIVES) / len(OBJECTIVES)
        table[cat] = row
    return {
        "table": table,
        "cells": counted,
        "excluded_cells": excluded,
        "disagreement": disagree / counted,
    }


def winner_frame(distribution: Dict[str, Any]) -> pd.DataFrame:
    rows = [
        {"category": cat, **{k: round(v, 1) for k, v in values.items()}}
        for cat, values in distribution["table"].items()
    ]
    return pd.DataFrame(rows, columns=["category", *OBJECTIVES, "avg"])


# ============== 失败率与轮数扩展 ==============

def failure_rates(
    results: Mapping[Tuple[str, float, str], AggregateMetrics],
    qps_levels: Optional[Sequence[float]] = None,
) -> pd.DataFrame:
    """每个配置在各 QPS 下的失败率（1 − success_rate，对负载取平均）"""
    per_config: Dict[str, Dict[float, List[float]]] = defaultdict(lambda: defaultdict(list))
    for (workload, qps, config), metrics in results.items():
        if qps_levels is not None and qps not in qps_levels:
            continue
        per_config[config][qps].append(1.0 - metrics.success_rate)
    levels = sorted(qps_levels) if qps_levels is not None else sorted({k[1] for k in results})
    rows = []
    for config in sorted(per_config):
        row = {"config": config}
        for q in levels:
            values = per_config[config].get(q)
            row[f"qps_{q:g}"] = _mean(values) if values else None
        rows.append(row)
    return pd.DataFrame(rows, columns=["config", *[f"qps_{q:g}" for q in levels]])


def turn_scaling(results: Mapping[Tuple[int, str], AggregateMetrics]) -> pd.DataFrame:
    """
    轮数扩展：(num_turns, config_label) -> T2+ TTFT 均值
    每行一个轮数，每列一个配置
    """
    turns = sorted({k[0] for k in results})
    configs = sorted({k[1] for k in results})
    rows = []
    for n in turns:
        row = {"num_turns": n}
        for c in configs:
            m = results.get((n, c))
            row[c] = m.ttft_t2plus_mean if m is not None else None
        rows.append(row)
    return pd.DataFrame(rows, columns=["num_turns", *configs])
