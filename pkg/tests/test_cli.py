# tests/test_cli.py
"""
命令行测试：产物、可复现性、退出码
"""

import hashlib
import json

import pytest

from app.cli import EXIT_ERROR, EXIT_OK, EXIT_VALIDATION, build_parser, resolve_workload, run
from app.config import settings
from app.schemas.workload import WorkloadCategory
from app.services.cost_model import calibration_hash, load_calibration
from app.services.metrics_service import read_csv
from app.services.routing_service import load_table


def digest(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def simulate_args(out, **overrides):
    args = {
        "--config": "1P_3D",
        "--x": "1",
        "--workload": "balanced_small",
        "--qps": "2",
        "--duration-s": "5",
        "--seed": "3",
        "--out": str(out),
    }
    args.update(overrides)
    argv = ["simulate"]
    for k, v in args.items():
        argv.extend([k, v])
    return argv


PLAN = """\
name: cli
configs:
  - {shape: 4R}
  - {shape: 1P_3D, x: 0}
  - {shape: 1P_3D, x: 1}
workloads: [t1short_bal1]
qps_levels: [1, 2]
seeds: [0]
duration_s: 10
"""


# ============== simulate ==============

def test_simulate_writes_records_and_aggregate(tmp_path):
    assert run(simulate_args(tmp_path)) == EXIT_OK
    records = list(tmp_path.glob("*.records.jsonl"))
    aggregates = list(tmp_path.glob("*.aggregate.csv"))
    assert len(records) == 1 and len(aggregates) == 1
    assert records[0].name.endswith("__balanced_small__qps2__seed3.records.jsonl")

    manifest, frame = read_csv(aggregates[0])
    assert manifest["seed"] == 3
    assert manifest["calibration_hash"]
    assert list(frame["x_mode"]) == ["x=1"]
    assert frame["success_rate"].iloc[0] == 1.0


def test_simulate_is_reproducible(tmp_path):
    assert run(simulate_args(tmp_path)) == EXIT_OK
    first = {p.name: digest(p) for p in tmp_path.iterdir()}
    assert run(simulate_args(tmp_path)) == EXIT_OK
    second = {p.name: digest(p) for p in tmp_path.iterdir()}
    assert first == second


def test_simulate_seed_changes_records(tmp_path):
    run(simulate_args(tmp_path / "a", **{"--seed": "1"}))
    run(simulate_args(tmp_path / "b", **{"--seed": "2"}))
    a = next((tmp_path / "a").glob("*.records.jsonl")).read_text(encoding="utf-8").splitlines()[1:]
    b = next((tmp_path / "b").glob("*.records.jsonl")).read_text(encoding="utf-8").splitlines()[1:]
    assert a != b


@pytest.mark.parametrize(
    "overrides",
    [
        {"--workload": "no_such_workload"},
        {"--config": "3Q"},
        {"--x": "2"},
        {"--config": "4P"},
    ],
)
def test_simulate_validation_errors(tmp_path, overrides):
    assert run(simulate_args(tmp_path, **overrides)) == EXIT_VALIDATION


def test_missing_required_argument():
    assert run(["simulate", "--config", "4R"]) == EXIT_VALIDATION


def test_common_defaults_per_command():
    parser = build_parser()
    for argv in (
        ["simulate", "--config", "1P_3D", "--workload", "balanced_small", "--qps", "8"],
        ["build-table"],
        ["ingest", "--trace", "t.jsonl", "--out", "o.jsonl"],
    ):
        args = parser.parse_args(argv)
        assert (args.seed, args.calibration) == (0, settings.CALIBRATION_PATH), argv[0]

    # sweep 不给时沿用计划文件
    args = parser.parse_args(["sweep"])
    assert (args.seed, args.calibration) == (None, None)


def test_simulate_uses_default_seed_and_calibration(tmp_path):
    argv = [
        "simulate", "--config", "1P_3D", "--x", "1", "--workload", "balanced_small",
        "--qps", "8", "--duration", "10", "--out", str(tmp_path),
    ]
    assert run(argv) == EXIT_OK
    manifest, _ = read_csv(next(tmp_path.glob("*.aggregate.csv")))
    assert manifest["seed"] == 0
    assert manifest["calibration_hash"] == calibration_hash(load_calibration(settings.CALIBRATION_PATH))
    assert next(tmp_path.glob("*.records.jsonl")).name.endswith("__seed0.records.jsonl")


def test_resolve_workload_names(tmp_path):
    assert resolve_workload("t1long_pre1", 5.0).turn1.input_tokens == 2048
    spec = resolve_workload("prefill_heavy_large", 5.0, num_turns=3)
    assert spec.category == WorkloadCategory.PREFILL_HEAVY
    assert spec.num_turns == 3

    path = tmp_path / "mine.yaml"
    path.write_text("turn1: {input: 128, output: 64}\nturn2plus: {input: 64, output: 256}\nqps: 3\n", encoding="utf-8")
    spec = resolve_workload(str(path), 7.0)
    assert spec.workload_id == "mine"
    assert spec.duration == 7.0


# ============== build-table ==============

def build_table_args(out):
    return [
        "build-table", "--grid", "workload", "--workload", "t1short_pre1",
        "--qps-levels", "2,8", "--duration-s", "5", "--weights", "1,1", "--out", str(out),
    ]


def test_build_table_entries_follow_scores(tmp_path):
    path = tmp_path / "table.json"
    code = run(build_table_args(path))
    table = load_table(path)
    assert code == EXIT_OK
    assert len(table.entries) == 2
    assert table.weights.w_ttft == 1.0 and table.weights.w_tpot == 1.0

    for key, entry in table.entries.items():
        assert key == entry.key.as_string()
        assert entry.available
        assert entry.delta_ttft == pytest.approx((entry.ttft_x0 - entry.ttft_x1) / entry.ttft_x0)
        assert entry.delta_tpot == pytest.approx((entry.tpot_x1 - entry.tpot_x0) / entry.tpot_x0)
        assert entry.score == pytest.approx(entry.delta_ttft - entry.delta_tpot)
        assert entry.x_star == (1 if entry.score > 0 else 0)


def test_build_table_is_byte_stable(tmp_path):
    path = tmp_path / "table.json"
    run(build_table_args(path))
    first = digest(path)
    run(build_table_args(path))
    assert digest(path) == first
    assert json.loads(path.read_text(encoding="utf-8"))["built_at"] == "1970-01-01T00:00:00+00:00"


def test_build_table_workload_grid_needs_workload(tmp_path):
    assert run(["build-table", "--grid", "workload", "--out", str(tmp_path / "t.json")]) == EXIT_VALIDATION


def test_bad_weights_rejected(tmp_path):
    assert run(["build-table", "--weights", "1", "--out", str(tmp_path / "t.json")]) == EXIT_VALIDATION


# ============== sweep / analyze ==============

@pytest.fixture
def swept(tmp_path):
    plan = tmp_path / "plan.yaml"
    plan.write_text(PLAN, encoding="utf-8")
    out = tmp_path / "results"
    assert run(["sweep", "--plan", str(plan), "--out", str(out)]) == EXIT_OK
    return plan, out


def test_sweep_writes_aggregates(swept):
    _, out = swept
    manifest, frame = read_csv(out / "aggregates.csv")
    assert len(frame) == 6
    assert set(frame["config"]) == {"4R", "1P_3D_x0", "1P_3D_x1"}
    assert manifest["calibration_hash"]
    assert not (out / "failures.json").exists()


def test_sweep_resume_reproduces_aggregates(swept):
    plan, out = swept
    before = (out / "aggregates.csv").read_text(encoding="utf-8").splitlines()[1:]
    assert run(["sweep", "--plan", str(plan), "--out", str(out), "--resume"]) == EXIT_OK
    after = (out / "aggregates.csv").read_text(encoding="utf-8").splitlines()[1:]
    assert before == after


def test_analyze_winners(swept, tmp_path):
    _, out = swept
    report = tmp_path / "report"
    assert run(["analyze", "--winners", str(out), "--out", str(report)]) == EXIT_OK
    manifest, frame = read_csv(report / "winners.csv")
    assert {"Replica", "x=0", "x=1"} <= set(frame["category"])
    assert manifest["cells"] == 2
    for objective in ("ttft", "tpot", "throughput"):
        assert frame[objective].sum() == pytest.approx(100.0, abs=0.5)


def test_analyze_everything(swept):
    _, out = swept
    assert run(["analyze", "--results", str(out)]) == EXIT_OK
    for name in ("winners.csv", "pareto.csv", "compare_x0_x1.csv", "failure_rates.csv"):
        assert (out / name).exists()
    _, failures = read_csv(out / "failure_rates.csv")
    assert set(failures["config"]) == {"4R", "1P_3D_x0", "1P_3D_x1"}


def test_analyze_missing_results(tmp_path):
    assert run(["analyze", "--results", str(tmp_path / "nothing.csv")]) == EXIT_VALIDATION


# ============== ingest ==============

def test_ingest_missing_trace_is_an_error(tmp_path):
    assert run(["ingest", "--trace", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "o.jsonl")]) == EXIT_ERROR


def test_ingest_filters_and_exports(tmp_path):
    trace = tmp_path / "trace.jsonl"
    lines = [
        {"conv_id": "a", "turns": [{"input_tokens": 10, "output_tokens": 5}]},
        {"conv_id": "b", "turns": [{"input_tokens": 10, "output_tokens": 5}, {"input_tokens": 30, "output_tokens": 5}]},
        {"conv_id": "c", "turns": [{"input_tokens": 10, "output_tokens": 5}, {"input_tokens": 5, "output_tokens": 50}]},
    ]
    trace.write_text("\n".join(json.dumps(line) for line in lines) + "\n", encoding="utf-8")
    out = tmp_path / "clean.jsonl"

    assert run(["ingest", "--trace", str(trace), "--out", str(out)]) == EXIT_OK
    assert len(out.read_text(encoding="utf-8").splitlines()) == 2

    assert run(["ingest", "--trace", str(trace), "--out", str(out), "--prefill-heavy"]) == EXIT_OK
    kept = [json.loads(line)["conv_id"] for line in out.read_text(encoding="utf-8").splitlines()]
    assert kept == ["b"]
