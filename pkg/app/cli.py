# app/cli.py
"""
命令行入口：python -m app <command>

    simulate      单次仿真 -> 请求记录 + 聚合表
    build-table   离线测量网格并生成决策表
    sweep         按实验计划运行网格（可续跑）
    analyze       从已有聚合表生成胜者分布 / Pareto 前沿 / 模式对比 / 失败率
    weight-sweep  SLO 权重扫描
    serve         启动网关（帧协议或 HTTP）
    ingest        规范化对话轨迹

退出码：0 成功，1 执行失败，2 参数/校验错误，3 部分格子失败，4 结果全部退化（单次 simulate 退化只记警告）
所有产物都带 manifest（命令行、种子、标定摘要），用同样的命令可以逐字节复现
"""

import argparse
import asyncio
import json
import logging
import shlex
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
import yaml
from pydantic import ValidationError

from app.config import settings
from app.database import dispose_engine
from app.schemas.routing import QPS_GRID, ContextClass, DynamicPolicy, SLOWeights, StaticPolicy, WorkloadKey
from app.schemas.sweep import ConfigSpec, SweepPlan
from app.schemas.workload import TraceFilter, WorkloadCategory, WorkloadSpec
from app.services.cost_model import calibration_hash, load_calibration
from app.services.exceptions import EmptyResultException, ServiceException, ValidationException
from app.services.metrics_service import (
    aggregate,
    aggregate_row,
    aggregates_to_frame,
    failure_rates,
    pareto_frontier,
    read_csv,
    records_to_jsonl,
    results_from_frame,
    winner_distribution,
    winner_frame,
    write_csv,
)
from app.services.routing_service import (
    DEFAULT_BUILT_AT,
    build_decision_table,
    default_grid,
    load_table,
    representative_spec,
    save_table,
    workload_grid,
)
from app.services.simulator import build_cluster, make_config, run_simulation
from app.services.sweep_service import compare_modes, make_runner, run_sweep, weight_sweep
from app.services.workload_service import (
    export_trace,
    generate_conversations,
    ingest_trace,
    load_workload_spec,
    workload_catalog,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION = 2
EXIT_PARTIAL = 3
EXIT_DEGENERATE = 4


# ============== 参数解析辅助 ==============

def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的数字: {text}")


def _weights(text: str) -> SLOWeights:
    try:
        return SLOWeights.parse(text)
    except (ValueError, ValidationError) as e:
        raise argparse.ArgumentTypeError(f"权重格式应为 w_ttft,w_tpot: {text} ({e})")


def resolve_workload(name: str, duration: float, num_turns: Optional[int] = None) -> WorkloadSpec:
    """
    负载名解析顺序：默认目录 id（t1short_bal1）-> YAML 文件 -> 网格代表负载（balanced_small）
    """
    catalog = workload_catalog(duration=duration, num_turns=num_turns or 2)
    if name in catalog:
        return catalog[name]
    path = Path(name)
    if path.suffix in (".yaml", ".yml") or path.exists():
        spec = load_workload_spec(path)
        updates: Dict[str, Any] = {"duration": duration}
        if num_turns is not None:
            updates["num_turns"] = num_turns
        return spec.model_copy(update=updates)
    for wtype in WorkloadCategory:
        prefix = f"{wtype.value}_"
        if name.startswith(prefix):
            ctx = name[len(prefix):]
            if ctx in {c.value for c in ContextClass}:
                key = WorkloadKey(context_class=ContextClass(ctx), workload_type=wtype, qps_bin=QPS_GRID[0])
                spec = representative_spec(key, duration=duration, num_turns=num_turns or 2)
                return spec.model_copy(update={"workload_id": name})
    raise ValidationException(f"未知的负载: {name}")


def _manifest(args: argparse.Namespace, calib_hash: Optional[str] = None, **extra) -> Dict[str, Any]:
    manifest = {"command": args.command_line, "seed": args.seed}
    if calib_hash is not None:
        manifest["calibration_hash"] = calib_hash
    manifest.update(extra)
    return manifest


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    return path


# ============== 各命令 ==============

def cmd_simulate(args: argparse.Namespace) -> int:
    calib = load_calibration(args.calibration)
    spec = resolve_workload(args.workload, args.duration_s, args.num_turns).with_qps(args.qps)
    if args.dynamic:
        table = load_table(args.table)
        routing = DynamicPolicy(table=table, weights=table.weights)
    else:
        routing = StaticPolicy(x=args.x)
    config = make_config(
        args.config, calib, routing=routing,
        max_decode_batch=args.max_decode_batch, request_timeout=args.request_timeout_s,
    )

    conversations = generate_conversations(spec, args.seed)
    if not conversations:
        raise EmptyResultException(f"{spec.workload_id} 在 {args.duration_s}s 内没有到达的对话")
    result = run_simulation(build_cluster(config), conversations, spec.qps, args.seed, think_time=spec.think_time)

    window = max(result.makespan, spec.duration)
    metrics = aggregate(result.records, window)
    manifest = _manifest(args, result.manifest["calibration_hash"], workload_id=spec.workload_id, window=window)
    for k, v in result.manifest.items():
        manifest.setdefault(k, v)

    stem = f"{config.label}__{spec.workload_id}__qps{spec.qps:g}__seed{args.seed}"
    out = Path(args.out)
    records_path = _write_text(out / f"{stem}.records.jsonl", records_to_jsonl(result.records, manifest))
    x_mode = ConfigSpec(shape=args.config, mode="dynamic" if args.dynamic else "static", x=args.x).x_mode
    frame = aggregates_to_frame([aggregate_row(config.label, x_mode, spec.workload_id, spec.qps, metrics)])
    aggregate_path = write_csv(frame, out / f"{stem}.aggregate.csv", manifest)

    logger.info(f"记录: {records_path}，聚合: {aggregate_path}")
    print(json.dumps(metrics.model_dump(mode="json"), ensure_ascii=False, indent=2))
    if metrics.degraded:
        logger.warning(f"本次运行退化: 成功率 {metrics.success_rate:.3f}")
    return EXIT_OK


def cmd_build_table(args: argparse.Namespace) -> int:
    calib = load_calibration(args.calibration)
    qps_levels = args.qps_levels or list(QPS_GRID)
    if args.grid == "default":
        grid = default_grid(qps_levels, duration=args.duration_s)
    else:
        if not args.workload:
            raise ValidationException("--grid workload 需要 --workload")
        grid = workload_grid(resolve_workload(args.workload, args.duration_s, args.num_turns), qps_levels)

    runner = make_runner(args.shape, calib, seeds=(args.seed,))
    table = build_decision_table(grid, args.weights, runner, calibration_hash(calib), args.built_at)
    save_table(table, args.out)

    available = sum(1 for e in table.entries.values() if e.available)
    d_local = sum(1 for e in table.entries.values() if e.available and e.x_star == 1)
    print(f"决策表: {args.out}  条目 {len(table.entries)}，可用 {available}，x*=1 {d_local}")
    return EXIT_OK if available else EXIT_DEGENERATE


def load_plan(path: str) -> SweepPlan:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return SweepPlan.model_validate(yaml.safe_load(f) or {})
    except FileNotFoundError:
        raise ValidationException(f"实验计划不存在: {path}")
    except (ValidationError, yaml.YAMLError) as e:
        raise ValidationException(f"实验计划无效 {path}: {e}")


def cmd_sweep(args: argparse.Namespace) -> int:
    plan = load_plan(args.plan)
    if args.seed is not None:
        plan = plan.model_copy(update={"seeds": [args.seed]})
    calib = load_calibration(args.calibration or plan.calibration or settings.CALIBRATION_PATH)
    table_path = args.table or plan.table
    table = load_table(table_path) if table_path else None

    out = Path(args.out)
    manifest_db = out / "sweep_manifest.db"
    if manifest_db.exists() and not args.resume:
        # 不续跑时从头开始
        dispose_engine(manifest_db)
        manifest_db.unlink()
        logger.info(f"删除旧清单: {manifest_db}")

    results = run_sweep(plan, parallelism=args.parallelism, calib=calib, table=table, manifest_path=manifest_db)
    manifest = _manifest(args, calibration_hash(calib), **results.manifest)
    write_csv(results.to_frame(), out / "aggregates.csv", manifest)
    if results.failed:
        failures = {"|".join(str(p) for p in key): error for key, error in results.failed.items()}
        _write_text(out / "failures.json", json.dumps({"manifest": manifest, "failed": failures}, indent=2, sort_keys=True, ensure_ascii=False) + "\n")

    print(f"实验 {plan.name}: 成功 {len(results.cells)}，失败 {len(results.failed)} -> {out / 'aggregates.csv'}")
    if results.failed:
        return EXIT_PARTIAL
    if results.all_degraded:
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    source = Path(args.winners if isinstance(args.winners, str) else args.results)
    if source.is_dir():
        source = source / "aggregates.csv"
    source_manifest, frame = read_csv(source)
    results = results_from_frame(frame)
    out = Path(args.out) if args.out else source.parent
    manifest = _manifest(args, source_manifest.get("calibration_hash"), source=str(source))
    run_all = not (args.winners or args.pareto or args.compare or args.failures)

    if args.winners or run_all:
        distribution = winner_distribution(results)
        write_csv(winner_frame(distribution), out / "winners.csv", {
            **manifest,
            "cells": distribution["cells"],
            "excluded_cells": distribution["excluded_cells"],
            "disagreement": distribution["disagreement"],
        })
        print(winner_frame(distribution).to_string(index=False))

    if args.pareto or run_all:
        rows = []
        for workload in sorted({k[0] for k in results}):
            points = [
                {"workload_id": w, "qps": q, "config": c, "ttft_p99": m.ttft_t2plus_p99, "tps": m.tps}
                for (w, q, c), m in sorted(results.items())
                if w == workload and not m.degraded and m.ttft_t2plus_p99 is not None
            ]
            if points:
                rows.extend(pareto_frontier(points))
        write_csv(pd.DataFrame(rows, columns=["workload_id", "qps", "config", "ttft_p99", "tps"]), out / "pareto.csv", manifest)

    if args.compare or run_all:
        from_mode, _, to_mode = (args.compare or "0:1").partition(":")
        table, missing = compare_modes(results, from_mode, to_mode or "1")
        write_csv(table, out / f"compare_x{from_mode}_x{to_mode or '1'}.csv", {**manifest, "excluded": len(missing)})
        print(table.to_string(index=False))

    if args.failures or run_all:
        write_csv(failure_rates(results), out / "failure_rates.csv", manifest)

    return EXIT_OK


def cmd_weight_sweep(args: argparse.Namespace) -> int:
    calib = load_calibration(args.calibration)
    spec = resolve_workload(args.workload, args.duration_s, args.num_turns)
    weights_list = args.weights or [SLOWeights(w_ttft=1.0, w_tpot=w) for w in (1.0, 3.0, 6.0)]
    qps_levels = args.qps_levels or [4.0, 8.0, 12.0]
    frame = weight_sweep(args.shape, spec, weights_list, calib, qps_levels, seeds=(args.seed,))
    manifest = _manifest(args, calibration_hash(calib), shape=args.shape, workload_id=spec.workload_id)
    path = write_csv(frame, Path(args.out) / f"weight_sweep__{args.shape}__{spec.workload_id}.csv", manifest)
    print(frame.to_string(index=False))
    logger.info(f"权重扫描结果: {path}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from app.services.gateway_service import GatewayService

    service = GatewayService.from_table_path(
        args.table, session_ttl=args.session_ttl_s, backend_ttl=args.backend_ttl_s,
    )
    if args.transport == "http":
        import uvicorn
        from app.main import create_app

        uvicorn.run(
            create_app(service, prune_interval=args.prune_interval_s),
            host=args.host,
            port=args.port,
            log_level=args.log_level.lower(),
        )
        return EXIT_OK

    from app.services.framing import FramedGatewayServer

    server = FramedGatewayServer(service, args.host, args.port, args.prune_interval_s)
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        logger.info("网关停止")
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace) -> int:
    trace_filter = TraceFilter(
        min_turns=args.min_turns,
        prefill_heavy_only=args.prefill_heavy,
        sample_size=args.sample,
        seed=args.seed,
    )
    with open(args.trace, "rb") as f:
        conversations = ingest_trace(f, trace_filter)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(export_trace(conversations))
    print(f"轨迹: {len(conversations)} 个对话 -> {path}")
    return EXIT_OK


# ============== 解析器 ==============

def _common_parser(seed: Optional[int] = 0, calibration: Optional[str] = settings.CALIBRATION_PATH) -> argparse.ArgumentParser:
    """各子命令共用的参数；每个子命令各建一份，默认值互不影响"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=seed, help="随机种子")
    common.add_argument("--calibration", default=calibration, help="标定文件（YAML）")
    common.add_argument("--log-level", default="DEBUG" if settings.DEBUG else "INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()

    parser = argparse.ArgumentParser(prog="python -m app", description="多轮对话 PD 分离路由仿真与网关")
    sub = parser.add_subparsers(dest="command", required=True)

    def duration_args(p):
        p.add_argument("--duration-s", "--duration", dest="duration_s", type=float, default=10.0, help="到达窗口（秒）")
        p.add_argument("--num-turns", type=int, default=None, help="覆盖负载的轮数")

    p = sub.add_parser("simulate", parents=[common], help="单次仿真",
                       epilog="单次运行退化（成功率 < 0.95）时只记警告，退出码仍为 0")
    p.add_argument("--config", required=True, help="集群形状，如 1P_3D、4R、1R_1P_2D")
    p.add_argument("--x", type=float, default=0.0, help="静态路由比例 x ∈ [0,1]")
    p.add_argument("--dynamic", action="store_true", help="使用决策表动态路由")
    p.add_argument("--table", default=settings.TABLE_PATH, help="决策表路径（--dynamic 时使用）")
    p.add_argument("--workload", required=True, help="负载 id、YAML 文件或 <type>_<ctx>")
    p.add_argument("--qps", type=float, required=True)
    duration_args(p)
    p.add_argument("--max-decode-batch", type=int, default=128)
    p.add_argument("--request-timeout-s", type=float, default=30.0)
    p.add_argument("--out", default=settings.OUTPUT_DIR)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("build-table", parents=[common], help="生成决策表")
    p.add_argument("--weights", type=_weights, default=SLOWeights(), help="w_ttft,w_tpot")
    p.add_argument("--grid", choices=["default", "workload"], default="default")
    p.add_argument("--workload", help="--grid workload 时测量的负载")
    p.add_argument("--shape", default="1P_3D", help="测量所用的集群形状")
    p.add_argument("--qps-levels", type=_float_list, default=None)
    duration_args(p)
    p.add_argument("--built-at", default=DEFAULT_BUILT_AT, help="写入表头的时间戳")
    p.add_argument("--out", default=settings.TABLE_PATH)
    p.set_defaults(handler=cmd_build_table)

    # 不给 --seed / --calibration 时沿用计划文件里的设置
    p = sub.add_parser("sweep", parents=[_common_parser(seed=None, calibration=None)], help="运行实验网格")
    p.add_argument("--plan", default=settings.PLAN_PATH)
    p.add_argument("--out", default=settings.OUTPUT_DIR)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--resume", action="store_true", help="跳过清单中已完成的格子")
    p.add_argument("--table", default=None, help="动态配置使用的决策表")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("analyze", parents=[common], help="分析已有结果")
    p.add_argument("--results", default=settings.OUTPUT_DIR, help="aggregates.csv 或其所在目录")
    p.add_argument("--winners", nargs="?", const=True, default=None, metavar="RESULTS",
                   help="胜者分布；可直接跟结果路径")
    p.add_argument("--pareto", action="store_true")
    p.add_argument("--compare", default=None, help="FROM:TO，如 0:1、0:ppd")
    p.add_argument("--failures", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("weight-sweep", parents=[common], help="SLO 权重扫描")
    p.add_argument("--shape", default="1P_3D")
    p.add_argument("--workload", required=True)
    p.add_argument("--weights", type=_weights, action="append", default=None, help="可重复：--weights 1,1 --weights 1,3")
    p.add_argument("--qps-levels", type=_float_list, default=None)
    duration_args(p)
    p.add_argument("--out", default=settings.OUTPUT_DIR)
    p.set_defaults(handler=cmd_weight_sweep)

    p = sub.add_parser("serve", parents=[common], help="启动网关")
    p.add_argument("--transport", choices=["framed", "http"], default="framed")
    p.add_argument("--host", default=settings.GATEWAY_HOST)
    p.add_argument("--port", type=int, default=settings.GATEWAY_PORT)
    p.add_argument("--table", default=settings.TABLE_PATH)
    p.add_argument("--session-ttl-s", type=float, default=settings.SESSION_TTL_S)
    p.add_argument("--backend-ttl-s", type=float, default=settings.BACKEND_TTL_S)
    p.add_argument("--prune-interval-s", type=float, default=settings.PRUNE_INTERVAL_S)
    p.set_defaults(handler=cmd_serve)

    p = sub.add_parser("ingest", parents=[common], help="规范化对话轨迹")
    p.add_argument("--trace", required=True, help="逐行 JSON 轨迹文件")
    p.add_argument("--out", required=True)
    p.add_argument("--min-turns", type=int, default=2)
    p.add_argument("--prefill-heavy", action="store_true", help="只保留 Turn 2+ 输入/输出 > 2 的对话")
    p.add_argument("--sample", type=int, default=None)
    p.set_defaults(handler=cmd_ingest)

    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """解析参数并执行命令，返回退出码"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_VALIDATION
    args.command_line = shlex.join(["python", "-m", "app", *argv])

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    try:
        return args.handler(args)
    except EmptyResultException as e:
        logger.error(f"结果为空: {e}")
        return EXIT_DEGENERATE
    except (ValidationException, ValidationError) as e:
        logger.error(f"参数错误: {e}")
        return EXIT_VALIDATION
    except (ServiceException, OSError) as e:
        logger.error(f"执行失败: {e}")
        return EXIT_ERROR
    except Exception as e:
        logger.exception(f"未预期的错误: {e}")
        return EXIT_ERROR


def main():
    sys.exit(run())
