# app/services/sweep_service.py
"""
实验服务：配置 × 负载 × QPS × 种子网格、模式对比、权重扫描、轮数扩展
- 每个格子互不共享状态，交给有界进程池执行
- 清单（SQLite）记录每个格子的状态，续跑时跳过已完成的格子
- 格子种子由 (基础种子, 负载, QPS) 稳定哈希得到，与调度顺序和进程数无关
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from sqlalchemy import select

from app.models.sweep_cell import CellStatus, SweepCell
from app.database import get_session_factory
from app.schemas.calibration import CalibrationTable
from app.schemas.cluster import ClusterConfig
from app.schemas.metrics import AggregateMetrics, SimResult
from app.schemas.routing import DecisionTable, DynamicPolicy, SLOWeights, StaticPolicy
from app.schemas.sweep import ConfigSpec, SweepPlan
from app.schemas.workload import WorkloadSpec
from app.services.cost_model import calibration_hash
from app.services.exceptions import EmptyResultException, ValidationException
from app.services.metrics_service import aggregate, aggregate_row, aggregates_to_frame, mean_of_seeds, turn_scaling
from app.services.routing_service import measure_grid, table_from_measurements, workload_grid
from app.services.simulator import build_cluster, make_config, run_simulation
from app.services.workload_service import generate_conversations, workload_catalog

logger = logging.getLogger(__name__)

# (配置标签, 负载 id, QPS, 种子)
CellKey = Tuple[str, str, float, int]

# QPS 档位划分
QPS_BANDS = {
    "low": (0.5, 2.0),
    "med": (4.0, 8.0),
    "high": (12.0, 20.0),
}


def qps_band(qps: float) -> Optional[str]:
    """QPS 所属档位（不在任何档位内返回 None）"""
    for band, (lo, hi) in QPS_BANDS.items():
        if lo <= qps <= hi:
            return band
    return None


def cell_seed(base_seed: int, workload_id: str, qps: float) -> int:
    """同一 (负载, QPS) 的所有配置看到相同的对话"""
    digest = hashlib.sha256(f"{base_seed}|{workload_id}|{qps!r}".encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


# ============== 默认配置 ==============

def default_config_catalog() -> List[ConfigSpec]:
    """17 个配置"""
    configs = [ConfigSpec(shape="4R")]
    for shape in ("1P_3D", "2P_2D", "3P_1D"):
        configs.append(ConfigSpec(shape=shape, x=0.0))
        configs.append(ConfigSpec(shape=shape, x=1.0))
    configs.append(ConfigSpec(shape="1P_3D", x=1 / 3))
    configs.append(ConfigSpec(shape="1P_3D", x=2 / 3))
    configs.append(ConfigSpec(shape="2P_2D", x=0.5))
    for shape, xs in (("1R_1P_2D", (0.0, 1.0, 0.5)), ("1R_2P_1D", (0.0, 1.0)), ("2R_1P_1D", (0.0, 1.0))):
        configs.extend(ConfigSpec(shape=shape, x=x) for x in xs)
    return configs


def core_configs() -> List[ConfigSpec]:
    """不含混合形状的 10 个核心配置"""
    return [c for c in default_config_catalog() if "R" not in c.shape or c.is_replica]


def default_plan(seeds: Sequence[int] = (0, 1, 2), duration: float = 10.0) -> SweepPlan:
    """17 × 18 × 10 的默认网格"""
    return SweepPlan(
        name="default",
        configs=default_config_catalog(),
        workloads=list(workload_catalog().keys()),
        seeds=list(seeds),
        duration_s=duration,
    )


# ============== 单个格子 ==============

def cluster_config(
    spec: ConfigSpec,
    calib: CalibrationTable,
    table: Optional[DecisionTable] = None,
    max_decode_batch: int = 128,
    request_timeout: float = 30.0,
) -> ClusterConfig:
    if spec.mode == "dynamic":
        if table is None:
            raise ValidationException(f"{spec.label}: 动态路由需要决策表")
        routing = DynamicPolicy(table=table, weights=table.weights)
    else:
        routing = StaticPolicy(x=spec.x)
    return make_config(
        spec.shape, calib, routing=routing,
        max_decode_batch=max_decode_batch, request_timeout=request_timeout,
    )


def run_cell(config: ClusterConfig, spec: WorkloadSpec, seed: int) -> Tuple[SimResult, AggregateMetrics]:
    """
    生成负载、运行一次仿真并聚合

    吞吐量窗口取仿真结束时刻（写入 manifest，便于从记录重算）
    """
    conversations = generate_conversations(spec, seed)
    if not conversations:
        raise EmptyResultException(f"{spec.workload_id} qps={spec.qps} seed={seed} 没有生成任何对话")
    result = run_simulation(build_cluster(config), conversations, spec.qps, seed, think_time=spec.think_time)
    window = max(result.makespan, spec.duration)
    result.manifest.update({"workload_id": spec.workload_id, "window": window})
    return result, aggregate(result.records, window)


def _run_cell_task(config: ClusterConfig, spec: WorkloadSpec, seed: int) -> Dict[str, Any]:
    # 进程池入口：只返回可序列化的结果
    _, metrics = run_cell(config, spec, seed)
    return metrics.model_dump(mode="json")


# ============== 结果集 ==============

@dataclass
class ResultSet:
    """每个格子每个种子一份 AggregateMetrics，外加失败格子"""
    cells: Dict[CellKey, AggregateMetrics] = field(default_factory=dict)
    failed: Dict[CellKey, str] = field(default_factory=dict)
    x_modes: Dict[str, str] = field(default_factory=dict)
    manifest: Dict[str, Any] = field(default_factory=dict)

    def by_cell(self) -> Dict[Tuple[str, float, str], AggregateMetrics]:
        """种子取平均：(负载, QPS, 配置) -> AggregateMetrics"""
        grouped: Dict[Tuple[str, float, str], List[Tuple[int, AggregateMetrics]]] = {}
        for (config, workload, qps, seed), metrics in self.cells.items():
            grouped.setdefault((workload, qps, config), []).append((seed, metrics))
        return {
            key: mean_of_seeds([m for _, m in sorted(runs, key=lambda r: r[0])])
            for key, runs in sorted(grouped.items())
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [
            aggregate_row(config, self.x_modes.get(config, ""), workload, qps, metrics)
            for (workload, qps, config), metrics in self.by_cell().items()
        ]
        return aggregates_to_frame(rows)

    @property
    def all_degraded(self) -> bool:
        return bool(self.cells) and all(m.degraded for m in self.cells.values())


def run_sweep(
    plan: SweepPlan,
    parallelism: int = 1,
    calib: Optional[CalibrationTable] = None,
    table: Optional[DecisionTable] = None,
    manifest_path: Union[str, Path, None] = None,
) -> ResultSet:
    """
    执行实验网格

    Args:
        plan: 实验计划
        parallelism: 进程数（1 表示在当前进程内顺序执行）
        calib: 标定表
        table: 动态配置使用的决策表
        manifest_path: SQLite 清单路径；给出时跳过已完成的格子
    """
    if calib is None:
        raise ValidationException("run_sweep 需要标定表")
    catalog = workload_catalog(duration=plan.duration, num_turns=plan.num_turns)
    specs: Dict[str, WorkloadSpec] = {}
    for w in plan.workloads:
        if isinstance(w, str):
            if w not in catalog:
                raise ValidationException(f"未知的负载 id: {w}")
            specs[w] = catalog[w]
        else:
            specs[w.workload_id] = w

    configs = {c.label: cluster_config(c, calib, table, plan.max_decode_batch, plan.request_timeout) for c in plan.configs}
    plan_hash = plan.plan_hash()
    results = ResultSet(
        x_modes={c.label: c.x_mode for c in plan.configs},
        manifest={
            "plan": plan.name,
            "plan_hash": plan_hash,
            "calibration_hash": calibration_hash(calib),
            "seeds": plan.seeds,
        },
    )

    keys: List[CellKey] = [
        (label, workload_id, qps, seed)
        for label in configs
        for workload_id in specs
        for qps in plan.qps_levels
        for seed in plan.seeds
    ]

    factory = get_session_factory(manifest_path) if manifest_path is not None else None
    done: Dict[CellKey, AggregateMetrics] = {}
    if factory is not None:
        with factory() as db:
            rows = db.execute(select(SweepCell).where(
                SweepCell.plan_hash == plan_hash,
                SweepCell.status == CellStatus.COMPLETED,
            )).scalars().all()
            for row in rows:
                done[row.key] = AggregateMetrics.model_validate(row.metrics)
    results.cells.update({k: v for k, v in done.items() if k in set(keys)})
    todo = [k for k in keys if k not in done]
    logger.info(f"实验 {plan.name}: 共 {len(keys)} 个格子，已完成 {len(keys) - len(todo)}，待运行 {len(todo)}")

    def task_args(key: CellKey):
        label, workload_id, qps, seed = key
        spec = specs[workload_id].with_qps(qps)
        return configs[label], spec, cell_seed(seed, workload_id, qps)

    def record(key: CellKey, metrics: Optional[Dict[str, Any]], error: Optional[str]):
        if error is None:
            results.cells[key] = AggregateMetrics.model_validate(metrics)
        else:
            results.failed[key] = error
            logger.warning(f"格子失败 {key}: {error}")
        if factory is None:
            return
        label, workload_id, qps, seed = key
        with factory() as db:
            row = db.execute(select(SweepCell).where(
                SweepCell.plan_hash == plan_hash,
                SweepCell.config == label,
                SweepCell.workload_id == workload_id,
                SweepCell.qps == qps,
                SweepCell.seed == seed,
            )).scalar_one_or_none()
            if row is None:
                row = SweepCell(plan_hash=plan_hash, config=label, workload_id=workload_id, qps=qps, seed=seed)
                db.add(row)
            row.status = CellStatus.COMPLETED if error is None else CellStatus.FAILED
            row.metrics_json = json.dumps(metrics, sort_keys=True) if metrics is not None else None
            row.error = error
            db.commit()

    if parallelism <= 1:
        for key in todo:
            logger.debug(f"运行格子 {key}")
            try:
                record(key, _run_cell_task(*task_args(key)), None)
            except Exception as e:
                record(key, None, f"{type(e).__name__}: {e}")
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = {pool.submit(_run_cell_task, *task_args(key)): key for key in todo}
            for future in as_completed(futures):
                key = futures[future]
                try:
                    record(key, future.result(), None)
                except Exception as e:
                    record(key, None, f"{type(e).__name__}: {e}")

    # 按网格顺序排列，使结果与执行顺序无关
    results.cells = {k: results.cells[k] for k in keys if k in results.cells}
    results.failed = {k: results.failed[k] for k in keys if k in results.failed}
    logger.info(f"实验 {plan.name} 结束: 成功 {len(results.cells)}，失败 {len(results.failed)}")
    return results


# ============== 分析 ==============

def compare_modes(
    results: Dict[Tuple[str, float, str], AggregateMetrics],
    from_mode: str = "0",
    to_mode: str = "1",
    metric: str = "ttft_t2plus_mean",
) -> Tuple[pd.DataFrame, List[Tuple[str, float, str]]]:
    """
    同一形状从 x=from_mode 切换到 x=to_mode 的相对变化（负值表示改善）

    Args:
        results: (负载, QPS, 配置标签) -> AggregateMetrics（已对种子取平均）
        from_mode / to_mode: 标签后缀，"0"、"1"、"0.5"、"ppd" 等

    Returns:
        (每个形状 × 档位的平均变化百分比, 缺少对应格子而被排除的键)
    """
    def suffix(mode: str) -> str:
        return "_ppd" if mode == "ppd" else f"_x{mode}"

    src_suffix, dst_suffix = suffix(from_mode), suffix(to_mode)
    changes: Dict[Tuple[str, str], List[float]] = {}
    missing: List[Tuple[str, float, str]] = []
    for (workload, qps, label), src in sorted(results.items()):
        if not label.endswith(src_suffix):
            continue
        shape = label[: -len(src_suffix)]
        band = qps_band(qps)
        if band is None:
            continue
        dst = results.get((workload, qps, shape + dst_suffix))
        src_value = getattr(src, metric)
        dst_value = getattr(dst, metric) if dst is not None else None
        if dst is None or src_value is None or dst_value is None or src_value == 0:
            missing.append((workload, qps, shape + dst_suffix))
            continue
        changes.setdefault((shape, band), []).append((dst_value - src_value) / src_value)

    if missing:
        logger.info(f"模式对比排除 {len(missing)} 个缺少对应格子的点")

    shapes = sorted({shape for shape, _ in changes})
    rows = []
    for shape in shapes:
        row = {"shape": shape}
        for band in QPS_BANDS:
            values = changes.get((shape, band))
            row[band] = 100.0 * math.fsum(values) / len(values) if values else None
        rows.append(row)
    return pd.DataFrame(rows, columns=["shape", *QPS_BANDS]), missing


def make_runner(
    shape: str,
    calib: CalibrationTable,
    seeds: Sequence[int] = (0,),
    max_decode_batch: int = 128,
    request_timeout: float = 30.0,
):
    """离线阶段的 runner：在给定形状上以 x 运行，返回 (T2+ TTFT 均值, TPOT 均值)"""

    def runner(spec: WorkloadSpec, x: int) -> Tuple[float, float]:
        config = make_config(
            shape, calib, routing=StaticPolicy(x=float(x)),
            max_decode_batch=max_decode_batch, request_timeout=request_timeout,
        )
        runs = [run_cell(config, spec, cell_seed(s, spec.workload_id, spec.qps))[1] for s in seeds]
        merged = mean_of_seeds(runs)
        if merged.ttft_t2plus_mean is None or merged.tpot_mean is None:
            raise EmptyResultException(f"{spec.workload_id} qps={spec.qps} x={x} 没有完成的 Turn 2+ 请求")
        return merged.ttft_t2plus_mean, merged.tpot_mean

    return runner


def weight_sweep(
    shape: str,
    spec: WorkloadSpec,
    weights_list: Sequence[SLOWeights],
    calib: CalibrationTable,
    qps_levels: Sequence[float],
    seeds: Sequence[int] = (0,),
) -> pd.DataFrame:
    """
    权重扫描：一次测量，多组权重各生成决策表并运行动态路由

    Returns:
        每组权重一行：w_ttft, w_tpot, ttft_reduction, tpot_degradation, d_local_ratio
    """
    runner = make_runner(shape, calib, seeds)
    measurements = measure_grid(workload_grid(spec, qps_levels), runner)
    calib_hash = calibration_hash(calib)

    def run_all(routing) -> List[AggregateMetrics]:
        runs = []
        for q in qps_levels:
            config = make_config(shape, calib, routing=routing)
            for s in seeds:
                runs.append(run_cell(config, spec.with_qps(q), cell_seed(s, spec.workload_id, q))[1])
        return runs

    def mean_of(runs: List[AggregateMetrics], name: str) -> float:
        values = [getattr(r, name) for r in runs if getattr(r, name) is not None]
        if not values:
            raise EmptyResultException(f"权重扫描没有可用的 {name}")
        return math.fsum(values) / len(values)

    baseline = run_all(StaticPolicy(x=0.0))
    base_ttft = mean_of(baseline, "ttft_t2plus_mean")
    base_tpot = mean_of(baseline, "tpot_mean")

    rows = []
    for weights in weights_list:
        table = table_from_measurements(measurements, weights, calib_hash)
        runs = run_all(DynamicPolicy(table=table, weights=weights))
        ttft = mean_of(runs, "ttft_t2plus_mean")
        tpot = mean_of(runs, "tpot_mean")
        rows.append({
            "w_ttft": weights.w_ttft,
            "w_tpot": weights.w_tpot,
            "ttft_reduction": (base_ttft - ttft) / base_ttft,
            "tpot_degradation": (tpot - base_tpot) / base_tpot,
            "d_local_ratio": mean_of(runs, "d_local_ratio"),
        })
        logger.info(f"权重 ({weights.w_ttft}, {weights.w_tpot}): D 本地比例 {rows[-1]['d_local_ratio']:.2f}")
    return pd.DataFrame(rows, columns=["w_ttft", "w_tpot", "ttft_reduction", "tpot_degradation", "d_local_ratio"])


def turn_scaling_sweep(
    base_workload: WorkloadSpec,
    turns_list: Sequence[int],
    configs: Sequence[ConfigSpec],
    qps: float,
    calib: CalibrationTable,
    seeds: Sequence[int] = (0,),
) -> pd.DataFrame:
    """轮数扩展：不同轮数下各配置的 T2+ TTFT"""
    results: Dict[Tuple[int, str], AggregateMetrics] = {}
    for n in turns_list:
        if n < 2:
            raise ValidationException("轮数扩展至少需要 2 轮")
        spec = base_workload.with_turns(n).with_qps(qps)
        for c in configs:
            config = cluster_config(c, calib)
            runs = [run_cell(config, spec, cell_seed(s, spec.workload_id, qps))[1] for s in seeds]
            results[(n, c.label)] = mean_of_seeds(runs)
    return turn_scaling(results)
