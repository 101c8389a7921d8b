# tests/test_workload.py
"""
负载生成与轨迹导入测试
"""

import json

import numpy as np
import pytest

from app.schemas.workload import (
    Conversation,
    TraceFilter,
    TurnProfile,
    WorkloadCategory,
    WorkloadSpec,
    classify_ratio,
)
from app.services.exceptions import EmptyResultException, TraceFormatException, ValidationException
from app.services.workload_service import (
    arrival_schedule,
    assign_arrivals,
    export_trace,
    generate_conversations,
    ingest_trace,
    load_workload_spec,
    message_digest,
    workload_catalog,
)


def make_spec(**kwargs) -> WorkloadSpec:
    fields = dict(
        workload_id="unit",
        turn1=TurnProfile(input=256, output=128),
        turn2plus=TurnProfile(input=512, output=256),
        num_turns=2,
        qps=4.0,
        duration_s=10.0,
    )
    fields.update(kwargs)
    return WorkloadSpec(**fields)


def trace_line(conv_id: str, turns, **extra) -> str:
    record = {"conv_id": conv_id, "turns": [{"input_tokens": i, "output_tokens": o} for i, o in turns]}
    record.update(extra)
    return json.dumps(record)


# ============== 到达过程 ==============

def test_arrival_zero_window():
    assert arrival_schedule(10, 0, seed=1) == []


def test_arrival_deterministic():
    assert arrival_schedule(4, 10, seed=42) == arrival_schedule(4, 10, seed=42)
    assert arrival_schedule(4, 10, seed=42) != arrival_schedule(4, 10, seed=43)


def test_arrival_sorted_and_inside_window():
    times = arrival_schedule(20, 5, seed=3)
    assert all(0 <= t < 5 for t in times)
    assert all(a < b for a, b in zip(times, times[1:]))


def test_arrival_mean_gap():
    times = arrival_schedule(8, 1000, seed=0)
    gaps = np.diff([0.0] + times)
    assert abs(gaps.mean() - 0.125) / 0.125 < 0.02


def test_arrival_rejects_bad_rate():
    with pytest.raises(ValidationException):
        arrival_schedule(0, 10, seed=0)
    with pytest.raises(ValidationException):
        arrival_schedule(1, -1, seed=0)


def test_poisson_count_mean():
    counts = np.array([len(arrival_schedule(2, 10, seed=s)) for s in range(1000)])
    # 均值 20，方差 20
    assert abs(counts.mean() - 20) < 3 * np.sqrt(20 / len(counts))


# ============== 合成负载 ==============

def test_generate_about_forty_conversations():
    convs = generate_conversations(make_spec(qps=4, duration_s=10), seed=0)
    assert 20 <= len(convs) <= 60
    assert all(len(c.turns) == 2 for c in convs)


def test_generate_tiny_window_may_be_empty():
    convs = generate_conversations(make_spec(qps=1, duration_s=0.001), seed=0)
    assert convs == [] or len(convs) == 1


def test_generate_context_is_sum_of_prior_turns():
    convs = generate_conversations(make_spec(num_turns=4), seed=5)
    conv = convs[0]
    assert [t.cached_context_tokens for t in conv.turns] == [0, 384, 384 + 768, 384 + 2 * 768]
    assert conv.turns[0].arrival_time is not None
    assert all(t.arrival_time is None for t in conv.turns[1:])


def test_generate_deterministic_and_unique_digests():
    a = generate_conversations(make_spec(), seed=9)
    b = generate_conversations(make_spec(), seed=9)
    assert [c.model_dump() for c in a] == [c.model_dump() for c in b]
    assert len({c.first_message_digest for c in a}) == len(a)


def test_generate_jitter_stays_positive():
    convs = generate_conversations(make_spec(jitter_pct=50), seed=2)
    tokens = [t.new_input_tokens for c in convs for t in c.turns]
    assert min(tokens) >= 1
    assert len(set(tokens)) > 2


def test_spec_rejects_non_positive():
    with pytest.raises(ValueError):
        make_spec(qps=0)
    with pytest.raises(ValueError):
        make_spec(duration_s=0)


def test_spec_category_derived_and_checked():
    assert make_spec().category == WorkloadCategory.BALANCED
    with pytest.raises(ValueError):
        make_spec(category="prefill_heavy")


def test_classify_ratio_thresholds():
    assert classify_ratio(100, 500) == WorkloadCategory.DECODE_HEAVY
    assert classify_ratio(250, 500) == WorkloadCategory.BALANCED
    assert classify_ratio(1000, 500) == WorkloadCategory.BALANCED
    assert classify_ratio(1001, 500) == WorkloadCategory.PREFILL_HEAVY
    assert classify_ratio(10, 0) == WorkloadCategory.PREFILL_HEAVY


def test_conversation_rejects_bad_context():
    conv = generate_conversations(make_spec(), seed=0)[0]
    raw = conv.model_dump()
    raw["turns"][1]["cached_context_tokens"] += 1
    with pytest.raises(ValueError):
        Conversation.model_validate(raw)


def test_catalog_has_eighteen_workloads():
    catalog = workload_catalog()
    assert len(catalog) == 18
    categories = [spec.category for spec in catalog.values()]
    assert categories.count(WorkloadCategory.DECODE_HEAVY) == 8
    assert categories.count(WorkloadCategory.BALANCED) == 4
    assert categories.count(WorkloadCategory.PREFILL_HEAVY) == 6


def test_load_workload_file(tmp_path):
    path = tmp_path / "chat.yaml"
    path.write_text(
        "turn1: {input: 256, output: 128}\n"
        "turn2plus: {input: 2048, output: 128}\n"
        "num_turns: 3\nqps: 2\nduration_s: 5\n",
        encoding="utf-8",
    )
    spec = load_workload_spec(path)
    assert spec.workload_id == "chat"
    assert spec.category == WorkloadCategory.PREFILL_HEAVY
    assert spec.num_turns == 3


def test_load_workload_rejects_unknown_field(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(
        "turn1: {input: 256, output: 128}\nturn2plus: {input: 256, output: 128}\nqps: 2\nburst: true\n",
        encoding="utf-8",
    )
    with pytest.raises(ValidationException):
        load_workload_spec(path)


# ============== 轨迹导入 ==============

def test_ingest_min_turns_filter():
    source = "\n".join([
        trace_line("a", [(100, 50)]),
        trace_line("b", [(100, 50), (200, 80), (300, 90)]),
    ])
    convs = ingest_trace(source, TraceFilter(min_turns=2))
    assert [c.conv_id for c in convs] == ["b"]
    assert [t.cached_context_tokens for t in convs[0].turns] == [0, 150, 430]


def test_ingest_prefill_heavy_filter():
    source = "\n".join([
        trace_line("heavy", [(100, 50), (3000, 100)]),
        trace_line("light", [(100, 50), (100, 400)]),
        trace_line("mid", [(100, 50), (300, 200)]),
    ])
    convs = ingest_trace(source, TraceFilter(prefill_heavy_only=True))
    assert [c.conv_id for c in convs] == ["heavy"]


def test_ingest_sample_is_stable():
    source = "\n".join(trace_line(f"c{i}", [(100, 50), (200, 40)]) for i in range(800))
    first = ingest_trace(source, TraceFilter(sample_size=500, seed=7))
    second = ingest_trace(source.encode("utf-8"), TraceFilter(sample_size=500, seed=7))
    assert len(first) == 500
    assert [c.conv_id for c in first] == [c.conv_id for c in second]


def test_ingest_ignores_extra_fields_and_digests_message():
    source = trace_line("x", [(10, 5), (20, 5)], first_message="hello", language="en")
    conv = ingest_trace(source)[0]
    assert conv.first_message_digest == message_digest("hello")
    assert conv.turns[0].arrival_time is None


def test_ingest_reports_line_number():
    source = "\n".join([trace_line("ok", [(10, 5), (20, 5)]), "{not json"])
    with pytest.raises(TraceFormatException) as exc:
        ingest_trace(source)
    assert exc.value.line_no == 2


def test_ingest_empty_result():
    source = trace_line("one", [(10, 5)])
    with pytest.raises(EmptyResultException):
        ingest_trace(source, TraceFilter(min_turns=2))


def test_export_then_ingest_keeps_turns():
    convs = generate_conversations(make_spec(num_turns=3), seed=1)
    again = ingest_trace(export_trace(convs))
    assert [c.conv_id for c in again] == [c.conv_id for c in convs]
    assert [c.first_message_digest for c in again] == [c.first_message_digest for c in convs]


def test_assign_arrivals_replays_in_order():
    source = "\n".join(trace_line(f"c{i}", [(100, 50), (200, 40)]) for i in range(50))
    convs = assign_arrivals(ingest_trace(source), qps=5, seed=0)
    times = [c.turns[0].arrival_time for c in convs]
    assert all(a < b for a, b in zip(times, times[1:]))
    assert all(t.arrival_time is None for c in convs for t in c.turns[1:])
    with pytest.raises(ValidationException):
        assign_arrivals(convs, qps=0, seed=0)
