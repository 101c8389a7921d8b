# tests/test_sweep.py
"""
实验服务测试：网格规模、执行与续跑、模式对比
"""

import pytest
from sqlalchemy import select

from app.cli import load_plan
from app.config import settings
from app.database import get_session_factory
from app.models.sweep_cell import CellStatus, SweepCell
from app.schemas.metrics import AggregateMetrics
from app.schemas.sweep import ConfigSpec, SweepPlan
from app.schemas.workload import TurnProfile, WorkloadSpec
from app.services import sweep_service
from app.services.exceptions import ValidationException
from app.services.sweep_service import (
    cell_seed,
    compare_modes,
    core_configs,
    default_config_catalog,
    default_plan,
    qps_band,
    run_sweep,
)


def small_workload() -> WorkloadSpec:
    return WorkloadSpec(
        workload_id="tiny",
        turn1=TurnProfile(input=256, output=16),
        turn2plus=TurnProfile(input=128, output=16),
        num_turns=2,
        qps=1.0,
        duration_s=10.0,
    )


def small_plan(**kwargs) -> SweepPlan:
    fields = dict(
        name="unit",
        configs=[ConfigSpec(shape="4R"), ConfigSpec(shape="1P_1D", x=0.0), ConfigSpec(shape="1P_1D", x=1.0)],
        workloads=[small_workload()],
        qps_levels=[1.0, 2.0],
        seeds=[0],
        duration_s=10.0,
    )
    fields.update(kwargs)
    return SweepPlan(**fields)


def metrics(ttft: float) -> AggregateMetrics:
    return AggregateMetrics(ttft_t2plus_mean=ttft, success_rate=1.0, degraded=False)


# ============== 网格 ==============

def test_default_plan_size():
    plan = default_plan()
    assert len(plan.configs) == 17
    assert len(plan.workloads) == 18
    assert plan.cell_count() // len(plan.seeds) == 3060


def test_plan_file_matches_default_grid():
    plan = load_plan(settings.PLAN_PATH)
    assert plan.cell_count() // len(plan.seeds) == 3060


def test_core_configs_exclude_hybrids():
    labels = [c.label for c in core_configs()]
    assert len(labels) == 10
    assert "4R" in labels
    assert all("R" not in label for label in labels if label != "4R")
    assert len(default_config_catalog()) == 17


def test_restricted_plan_cell_count():
    assert small_plan().cell_count() == 6


def test_plan_rejects_duplicate_labels():
    with pytest.raises(ValueError):
        small_plan(configs=[ConfigSpec(shape="4R"), ConfigSpec(shape="4R")])


@pytest.mark.parametrize("qps, band", [(0.5, "low"), (2, "low"), (4, "med"), (6, "med"), (8, "med"), (12, "high"), (20, "high"), (10, None)])
def test_qps_band(qps, band):
    assert qps_band(qps) == band


def test_cell_seed_stable_and_distinct():
    assert cell_seed(0, "w", 4.0) == cell_seed(0, "w", 4.0)
    assert cell_seed(0, "w", 4.0) != cell_seed(1, "w", 4.0)
    assert cell_seed(0, "w", 4.0) != cell_seed(0, "w", 8.0)


def test_config_labels_and_modes():
    assert ConfigSpec(shape="1P_3D", x=1 / 3).label == "1P_3D_x0.33"
    assert ConfigSpec(shape="1P_3D", x=1 / 3).x_mode == "x=0.33"
    assert ConfigSpec(shape="4R").x_mode == "replica"
    assert ConfigSpec(shape="2P_2D", mode="dynamic").label == "2P_2D_ppd"


# ============== 执行 ==============

def test_run_sweep_small_grid(calib):
    results = run_sweep(small_plan(), calib=calib)
    assert len(results.cells) == 6
    assert not results.failed
    frame = results.to_frame()
    assert len(frame) == 6
    assert set(frame["x_mode"]) == {"replica", "x=0", "x=1"}
    assert results.manifest["calibration_hash"]


def test_run_sweep_is_deterministic(calib):
    a = run_sweep(small_plan(), calib=calib)
    b = run_sweep(small_plan(), calib=calib)
    assert a.cells == b.cells
    assert a.to_frame().equals(b.to_frame())


def test_run_sweep_requires_calibration_and_table(calib):
    with pytest.raises(ValidationException):
        run_sweep(small_plan())
    with pytest.raises(ValidationException):
        run_sweep(small_plan(configs=[ConfigSpec(shape="1P_1D", mode="dynamic")]), calib=calib)
    with pytest.raises(ValidationException):
        run_sweep(small_plan(workloads=["no_such_workload"]), calib=calib)


def test_failed_cells_are_reported(calib, monkeypatch):
    original = sweep_service._run_cell_task

    def flaky(config, spec, seed):
        if config.label == "1P_1D_x1" and spec.qps == 2.0:
            raise RuntimeError("node crashed")
        return original(config, spec, seed)

    monkeypatch.setattr(sweep_service, "_run_cell_task", flaky)
    results = run_sweep(small_plan(), calib=calib)
    assert len(results.cells) == 5
    assert list(results.failed) == [("1P_1D_x1", "tiny", 2.0, 0)]
    assert "node crashed" in results.failed[("1P_1D_x1", "tiny", 2.0, 0)]


def test_resume_runs_only_missing_cells(calib, tmp_path, monkeypatch):
    db_path = tmp_path / "manifest.db"
    plan = small_plan()
    fresh = run_sweep(plan, calib=calib, manifest_path=db_path)

    # 模拟中断：删掉两个已完成的格子
    factory = get_session_factory(db_path)
    with factory() as db:
        rows = db.execute(select(SweepCell).where(SweepCell.status == CellStatus.COMPLETED)).scalars().all()
        assert len(rows) == 6
        for row in rows[:2]:
            db.delete(row)
        db.commit()

    calls = []
    original = sweep_service._run_cell_task

    def counting(config, spec, seed):
        calls.append((config.label, spec.qps))
        return original(config, spec, seed)

    monkeypatch.setattr(sweep_service, "_run_cell_task", counting)
    resumed = run_sweep(plan, calib=calib, manifest_path=db_path)
    assert len(calls) == 2
    assert resumed.cells == fresh.cells
    assert resumed.to_frame().equals(fresh.to_frame())


# ============== 模式对比 ==============

def test_compare_halved_ttft_is_minus_fifty():
    results = {}
    for workload in ("a", "b"):
        for qps in (1.0, 6.0, 16.0):
            results[(workload, qps, "1P_3D_x0")] = metrics(0.2 * qps)
            results[(workload, qps, "1P_3D_x1")] = metrics(0.1 * qps)
    frame, missing = compare_modes(results, "0", "1")
    assert not missing
    row = frame.to_dict("records")[0]
    assert row["shape"] == "1P_3D"
    for band in ("low", "med", "high"):
        assert row[band] == pytest.approx(-50.0)


def test_compare_reports_missing_counterpart():
    results = {
        ("a", 4.0, "2P_2D_x0"): metrics(0.2),
        ("a", 4.0, "2P_2D_x1"): metrics(0.3),
        ("b", 4.0, "2P_2D_x0"): metrics(0.2),
    }
    frame, missing = compare_modes(results, "0", "1")
    assert missing == [("b", 4.0, "2P_2D_x1")]
    assert frame.to_dict("records")[0]["med"] == pytest.approx(50.0)


def test_compare_against_dynamic():
    results = {
        ("a", 8.0, "1P_3D_x0"): metrics(0.4),
        ("a", 8.0, "1P_3D_ppd"): metrics(0.1),
    }
    frame, _ = compare_modes(results, "0", "ppd")
    assert frame.to_dict("records")[0]["med"] == pytest.approx(-75.0)
