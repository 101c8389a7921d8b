# tests/test_metrics.py
"""
指标服务测试：单请求指标、聚合、Pareto、胜者分布、结果文件
"""

import pandas as pd
import pytest

from app.schemas.metrics import AggregateMetrics, RequestRecord, RequestStatus, RouteTaken
from app.services.exceptions import EmptyResultException, TraceFormatException, ValidationException
from app.services.metrics_service import (
    aggregate,
    aggregate_row,
    aggregates_to_frame,
    config_category,
    failure_rates,
    mean_of_seeds,
    pareto_frontier,
    per_request,
    percentile_nearest_rank,
    read_csv,
    records_from_jsonl,
    records_to_jsonl,
    results_from_frame,
    winner_distribution,
    winner_frame,
    write_csv,
)


def completed(arrival=0.0, first=0.1, done=1.09, tokens=100, turn=1, route=RouteTaken.P_PATH, conv="c"):
    return RequestRecord(
        conv_id=conv,
        turn_index=turn,
        arrival=arrival,
        first_token=first,
        completion=done,
        output_tokens_emitted=tokens,
        route_taken=route,
        status=RequestStatus.COMPLETED,
    )


def timed_out(turn=1, conv="t"):
    return RequestRecord(
        conv_id=conv,
        turn_index=turn,
        arrival=0.0,
        route_taken=RouteTaken.P_PATH,
        status=RequestStatus.TIMED_OUT,
    )


def metrics(ttft=None, tpot=None, tps=0.0, success=1.0) -> AggregateMetrics:
    return AggregateMetrics(
        ttft_t2plus_mean=ttft,
        tpot_mean=tpot,
        tps=tps,
        success_rate=success,
        degraded=success < 0.95,
    )


# ============== 单请求 ==============

def test_per_request_example():
    m = per_request(completed())
    assert m.ttft == pytest.approx(0.1)
    assert m.tpot == pytest.approx(0.01)
    assert m.latency == pytest.approx(1.09)
    assert m.success


def test_per_request_single_token_has_no_tpot():
    m = per_request(completed(done=0.1, tokens=1))
    assert m.tpot is None
    assert m.success


def test_per_request_timed_out():
    m = per_request(timed_out())
    assert not m.success
    assert m.latency is None


# ============== 聚合 ==============

def test_aggregate_96_of_100_not_degraded():
    records = [completed(conv=f"c{i}") for i in range(96)] + [timed_out(conv=f"t{i}") for i in range(4)]
    agg = aggregate(records, window=10.0)
    assert agg.success_rate == pytest.approx(0.96)
    assert not agg.degraded
    assert agg.tps == pytest.approx(96 * 100 / 10.0)
    # 超时请求不进入延迟均值
    assert agg.latency_mean == pytest.approx(1.09)


def test_aggregate_94_of_100_degraded():
    records = [completed(conv=f"c{i}") for i in range(94)] + [timed_out(conv=f"t{i}") for i in range(6)]
    assert aggregate(records, window=10.0).degraded


def test_aggregate_nothing_completed():
    agg = aggregate([timed_out(), timed_out(turn=2)], window=5.0)
    assert agg.success_rate == 0.0
    assert agg.degraded
    assert agg.ttft_t1_mean is None
    assert agg.tpot_mean is None
    assert agg.tps == 0.0


def test_aggregate_splits_turns_and_counts_d_local():
    records = [
        completed(first=0.2, turn=1),
        completed(first=0.05, turn=2, route=RouteTaken.D_LOCAL),
        completed(first=0.15, turn=2, route=RouteTaken.P_PATH),
        completed(first=0.25, turn=3, route=RouteTaken.D_LOCAL),
    ]
    agg = aggregate(records, window=1.0)
    assert agg.ttft_t1_mean == pytest.approx(0.2)
    assert agg.ttft_t2plus_mean == pytest.approx(0.15)
    assert agg.ttft_t2plus_p99 == pytest.approx(0.25)
    assert agg.d_local_ratio == pytest.approx(2 / 3)


def test_aggregate_rejects_empty_and_bad_window():
    with pytest.raises(ValidationException):
        aggregate([], window=1.0)
    with pytest.raises(ValidationException):
        aggregate([completed()], window=0.0)


def test_percentile_nearest_rank():
    assert percentile_nearest_rank(list(range(1, 101)), 99) == 99
    assert percentile_nearest_rank([5.0], 99) == 5.0
    assert percentile_nearest_rank([], 99) is None


def test_degraded_must_match_success_rate():
    with pytest.raises(ValueError):
        AggregateMetrics(success_rate=0.5, degraded=False)


def test_mean_of_seeds_skips_missing():
    runs = [metrics(ttft=0.2, tps=10), metrics(ttft=None, tps=20, success=0.9), metrics(ttft=0.4, tps=30)]
    merged = mean_of_seeds(runs)
    assert merged.ttft_t2plus_mean == pytest.approx(0.3)
    assert merged.tps == pytest.approx(20)
    assert merged.success_rate == pytest.approx(2.9 / 3)
    assert not merged.degraded


# ============== Pareto 前沿 ==============

def test_pareto_dominated_point_dropped():
    points = [{"ttft_p99": 0.010, "tps": 100, "label": "a"}, {"ttft_p99": 0.020, "tps": 90, "label": "b"}]
    assert [p["label"] for p in pareto_frontier(points)] == ["a"]


def test_pareto_trade_off_keeps_both():
    points = [{"ttft_p99": 0.010, "tps": 100, "label": "a"}, {"ttft_p99": 0.005, "tps": 80, "label": "b"}]
    assert [p["label"] for p in pareto_frontier(points)] == ["b", "a"]


def test_pareto_duplicates_once():
    points = [{"ttft_p99": 0.01, "tps": 100, "label": "a"}, {"ttft_p99": 0.01, "tps": 100, "label": "b"}]
    assert len(pareto_frontier(points)) == 1


def test_pareto_empty_rejected():
    with pytest.raises(ValidationException):
        pareto_frontier([])


# ============== 胜者分布 ==============

@pytest.mark.parametrize(
    "label, category",
    [
        ("4R", "Replica"),
        ("1P_3D_x0", "x=0"),
        ("1P_3D_x1", "x=1"),
        ("2P_2D_x0.33", "0<x<1"),
        ("1R_1P_2D_x0", "hybrid"),
        ("3P_1D_ppd", "PPD"),
    ],
)
def test_config_category(label, category):
    assert config_category(label) == category


def test_single_cell_replica_wins_ttft():
    results = {
        ("w", 4.0, "4R"): metrics(ttft=0.05, tpot=0.02, tps=100),
        ("w", 4.0, "1P_3D_x0"): metrics(ttft=0.10, tpot=0.01, tps=200),
    }
    dist = winner_distribution(results)
    assert dist["table"]["Replica"]["ttft"] == 100.0
    assert dist["table"]["x=0"]["tpot"] == 100.0
    assert dist["table"]["x=0"]["throughput"] == 100.0
    assert dist["cells"] == 1


def test_three_cell_counts_and_disagreement():
    results = {
        # 格子 1：TTFT 与 TPOT 胜者不同
        ("a", 4.0, "4R"): metrics(ttft=0.05, tpot=0.03, tps=10),
        ("a", 4.0, "1P_3D_x1"): metrics(ttft=0.08, tpot=0.01, tps=20),
        # 格子 2：同一胜者
        ("b", 4.0, "4R"): metrics(ttft=0.20, tpot=0.03, tps=10),
        ("b", 4.0, "1P_3D_x1"): metrics(ttft=0.08, tpot=0.01, tps=20),
        # 格子 3：不同
        ("c", 8.0, "1P_3D_x0"): metrics(ttft=0.30, tpot=0.01, tps=20),
        ("c", 8.0, "1P_3D_x1"): metrics(ttft=0.10, tpot=0.02, tps=10),
    }
    dist = winner_distribution(results)
    assert dist["disagreement"] == pytest.approx(2 / 3)
    table = dist["table"]
    assert table["Replica"]["ttft"] == pytest.approx(100 / 3)
    assert table["x=1"]["ttft"] == pytest.approx(200 / 3)
    assert table["x=1"]["tpot"] == pytest.approx(200 / 3)
    assert table["x=0"]["tpot"] == pytest.approx(100 / 3)
    frame = winner_frame(dist)
    assert list(frame["category"])[:4] == ["Replica", "x=0", "0<x<1", "x=1"]


def test_degraded_configs_excluded_from_winners():
    results = {
        ("a", 4.0, "4R"): metrics(ttft=0.01, tpot=0.001, tps=999, success=0.5),
        ("a", 4.0, "1P_3D_x1"): metrics(ttft=0.08, tpot=0.01, tps=20),
        ("b", 4.0, "4R"): metrics(ttft=0.01, success=0.1),
        ("b", 4.0, "1P_3D_x1"): metrics(ttft=0.08, success=0.2),
    }
    dist = winner_distribution(results)
    assert dist["cells"] == 1
    assert dist["excluded_cells"] == 1
    assert dist["table"]["x=1"]["ttft"] == 100.0


def test_all_degraded_is_empty_result():
    results = {
        ("a", 4.0, "4R"): metrics(success=0.1),
        ("a", 4.0, "1P_3D_x1"): metrics(success=0.2),
    }
    with pytest.raises(EmptyResultException):
        winner_distribution(results)


def test_single_config_cell_rejected():
    with pytest.raises(ValidationException):
        winner_distribution({("a", 4.0, "4R"): metrics(ttft=0.1)})


def test_failure_rates_table():
    results = {
        ("a", 8.0, "1P_3D_x0"): metrics(success=0.8),
        ("b", 8.0, "1P_3D_x0"): metrics(success=0.6),
        ("a", 8.0, "4R"): metrics(success=1.0),
        ("a", 4.0, "4R"): metrics(success=1.0),
    }
    frame = failure_rates(results, qps_levels=[8.0])
    rows = {r["config"]: r["qps_8"] for r in frame.to_dict("records")}
    assert rows["1P_3D_x0"] == pytest.approx(0.3)
    assert rows["4R"] == 0.0


# ============== 结果文件 ==============

def test_records_jsonl_closure():
    records = [completed(conv="a"), completed(turn=2, route=RouteTaken.D_LOCAL, conv="a"), timed_out(conv="b")]
    text = records_to_jsonl(records, manifest={"seed": 3})
    manifest, again = records_from_jsonl(text)
    assert manifest == {"seed": 3}
    assert again == records
    assert aggregate(again, 2.0) == aggregate(records, 2.0)


def test_records_jsonl_bad_line():
    with pytest.raises(TraceFormatException):
        records_from_jsonl('{"conv_id": "x"}\n')


def test_csv_manifest_and_results(tmp_path):
    row = aggregate_row("1P_3D_x1", "x=1", "w", 4.0, metrics(ttft=0.1, tpot=0.01, tps=50.0, success=0.9))
    frame = aggregates_to_frame([row])
    path = write_csv(frame, tmp_path / "agg.csv", {"seed": 1, "calibration_hash": "abc"})
    assert path.read_text(encoding="utf-8").startswith("# manifest: ")

    manifest, loaded = read_csv(path)
    assert manifest == {"calibration_hash": "abc", "seed": 1}
    results = results_from_frame(loaded)
    m = results[("w", 4.0, "1P_3D_x1")]
    assert m.ttft_t2plus_mean == pytest.approx(0.1)
    assert m.ttft_t1_mean is None
    assert m.degraded


def test_results_from_frame_missing_columns():
    with pytest.raises(ValidationException):
        results_from_frame(pd.DataFrame([{"config": "4R"}]))
