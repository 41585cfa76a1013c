import json

import numpy as np
import pytest

from dispatchlab import labbench as lb
from dispatchlab import ruleset as rs
from dispatchlab.labbench import (InstanceGrid, benchmark_table, build_grid,
                                  compare, export_grid_json, export_report)
from dispatchlab.simkernel import InstanceSpec

SMALL_WINDOW = (51, 200)  # desk-scale window keeps these tests quick


def small_grid():
    return InstanceGrid("training", tuple(
        InstanceSpec(10, 25, a, u, 0.0)
        for a in (3.0, 6.0) for u in (0.85, 0.9)))


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

def test_training_grid_has_18_specs():
    grid = build_grid("training")
    assert len(grid) == 18
    assert {s.machines for s in grid.specs} == {10}
    assert {s.mean_proc_time for s in grid.specs} == {25, 50}
    assert {s.allowance for s in grid.specs} == {3, 4, 6}
    assert {s.utilization for s in grid.specs} == {0.85, 0.90, 0.97}
    assert {s.cv for s in grid.specs} == {0.0}


def test_validation_grid_has_75_specs():
    grid = build_grid("validation")
    assert len(grid) == 75
    assert {s.cv for s in grid.specs} == {0.0}
    assert {s.allowance for s in grid.specs} == {2, 3, 4, 6, 8}


def test_test_grid_has_897_specs():
    grid = build_grid("test")
    assert len(grid) == 897
    # extreme conditions only with ten machines, common pbar, deterministic
    for s in grid.specs:
        if s.allowance in (1.3, 10) or s.utilization in (0.70, 0.99):
            assert s.machines == 10
            assert s.mean_proc_time in (25, 50, 100)
            assert s.cv == 0.0
        if s.cv > 0:
            assert s.machines == 10
            assert s.mean_proc_time in (25, 50, 100)
    assert len(set(grid.specs)) == 897


def test_grid_order_is_lexicographic_and_deterministic():
    g1 = build_grid("test")
    g2 = build_grid("test")
    assert g1.specs == g2.specs
    keys = [s.key() for s in g1.specs]
    assert keys == sorted(keys)


def test_unknown_grid_kind():
    with pytest.raises(ValueError):
        build_grid("production")


def test_grid_json_export(tmp_path):
    grid = build_grid("training")
    path = tmp_path / "grid.json"
    export_grid_json(grid, path)
    payload = json.loads(path.read_text())
    assert payload["kind"] == "training"
    assert payload["count"] == 18
    assert len(payload["specs"]) == 18


# ---------------------------------------------------------------------------
# Benchmark table
# ---------------------------------------------------------------------------

def test_benchmark_table_shape_and_determinism():
    grid = small_grid()
    b1 = benchmark_table(grid, rs.BENCHMARK_RULES, reps=2, seed=9,
                         window=SMALL_WINDOW)
    b2 = benchmark_table(grid, rs.BENCHMARK_RULES, reps=2, seed=9,
                         window=SMALL_WINDOW)
    assert b1.values.shape == (5, 4, 2)
    np.testing.assert_array_equal(b1.values, b2.values)
    b3 = benchmark_table(grid, rs.BENCHMARK_RULES, reps=2, seed=10,
                         window=SMALL_WINDOW)
    assert not np.array_equal(b1.values, b3.values)


def test_benchmark_table_records_winners():
    grid = small_grid()
    bench = benchmark_table(grid, ("SPT", "RR"), reps=2, seed=3,
                            window=SMALL_WINDOW)
    assert set(bench.winners()) <= {"SPT", "RR"}
    assert bench.best_means().shape == (4,)
    assert (bench.best_means() <= bench.values.mean(axis=2)).all()


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

def test_self_comparison_yields_unit_tau_never_significant():
    grid = small_grid()
    bench = benchmark_table(grid, ("RR",), reps=4, seed=5,
                            window=SMALL_WINDOW)
    report = compare("RR", grid, bench, reps=4, seed=5, window=SMALL_WINDOW)
    for cell in report.cells:
        assert cell.tau == 1.0
        assert not cell.significant
    assert report.overall_tau() == pytest.approx(1.0, abs=1e-12)


def test_compare_requires_matching_seed_and_coverage():
    grid = small_grid()
    bench = benchmark_table(grid, ("RR",), reps=2, seed=5,
                            window=SMALL_WINDOW)
    with pytest.raises(ValueError, match="seed"):
        compare("RR", grid, bench, reps=2, seed=6, window=SMALL_WINDOW)
    with pytest.raises(ValueError, match="replications"):
        compare("RR", grid, bench, reps=3, seed=5, window=SMALL_WINDOW)
    other = InstanceGrid("training",
                         (InstanceSpec(10, 50, 4.0, 0.9, 0.0),))
    with pytest.raises(ValueError, match="cover"):
        compare("RR", other, bench, reps=2, seed=5, window=SMALL_WINDOW)


def test_compare_accepts_genome_and_flags_improvements():
    grid = small_grid()
    bench = benchmark_table(grid, ("SPT",), reps=6, seed=2,
                            window=SMALL_WINDOW)
    rule = rs.parse_rule("(+ (+ (* 2 PT) PTxS+/RPT) WINQ)")  # R1 form
    report = compare(rule, grid, bench, reps=6, seed=2, window=SMALL_WINDOW)
    assert report.rule == rs.format_rule(rule)
    assert len(report.cells) == 4
    # against bare SPT a due-date rule wins most cells decisively
    assert report.overall_tau() < 1.0


def test_tie_convention_on_zero_tardiness_cells():
    grid = InstanceGrid("validation",
                        (InstanceSpec(10, 25, 8.0, 0.7, 0.0),))
    bench = benchmark_table(grid, ("RR",), reps=3, seed=4,
                            window=SMALL_WINDOW)
    report = compare("R1", grid, bench, reps=3, seed=4, window=SMALL_WINDOW)
    cell = report.cells[0]
    if cell.mean_tardiness == 0.0 and cell.bench_best == 0.0:
        assert cell.tau == 1.0
        assert cell.tie
        assert not cell.significant


def test_geomean_aggregation_matches_recomputation():
    grid = small_grid()
    bench = benchmark_table(grid, ("RR", "SPT"), reps=3, seed=8,
                            window=SMALL_WINDOW)
    report = compare("PT+WINQ", grid, bench, reps=3, seed=8,
                     window=SMALL_WINDOW)
    taus = np.array([c.tau for c in report.cells])
    assert report.overall_tau() == pytest.approx(
        float(np.exp(np.mean(np.log(taus)))), abs=1e-12)
    pivot = report.pivot()
    for (u, a), value in pivot.items():
        member = [c.tau for c in report.cells
                  if c.spec.utilization == u and c.spec.allowance == a]
        assert value == pytest.approx(
            float(np.exp(np.mean(np.log(member)))), abs=1e-12)


def test_ttest_alternative_flag():
    grid = small_grid()
    bench = benchmark_table(grid, ("SPT",), reps=5, seed=2,
                            window=SMALL_WINDOW)
    report = compare("RR", grid, bench, reps=5, seed=2, sig_test="ttest",
                     window=SMALL_WINDOW)
    assert report.sig_test == "ttest"
    with pytest.raises(ValueError):
        compare("RR", grid, bench, reps=5, seed=2, sig_test="anova",
                window=SMALL_WINDOW)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def test_export_report_files(tmp_path):
    grid = small_grid()
    bench = benchmark_table(grid, ("RR",), reps=2, seed=1,
                            window=SMALL_WINDOW)
    report = compare("R2", grid, bench, reps=2, seed=1, window=SMALL_WINDOW)
    paths = export_report(report, tmp_path)
    cells = (tmp_path / "cells.csv").read_text(encoding="utf-8")
    lines = cells.strip().splitlines()
    assert lines[0].startswith("machines,pbar,allowance")
    assert len(lines) == 1 + len(report.cells)
    summary = (tmp_path / "summary.csv").read_text(encoding="utf-8")
    srows = summary.strip().splitlines()
    # 2 u-rows + header + Avg row; 2 a-columns + label + Avg
    assert len(srows) == 4
    assert srows[0] == "u\\a,3,6,Avg"
    assert srows[-1].startswith("Avg,")
    # re-export reproduces the bytes
    export_report(report, tmp_path)
    assert (tmp_path / "cells.csv").read_text(encoding="utf-8") == cells
    assert (tmp_path / "summary.csv").read_text(encoding="utf-8") == summary


def test_export_single_cell_report(tmp_path):
    grid = InstanceGrid("validation", (InstanceSpec(10, 25, 4.0, 0.9, 0.0),))
    bench = benchmark_table(grid, ("RR",), reps=2, seed=1,
                            window=SMALL_WINDOW)
    report = compare("SPT", grid, bench, reps=2, seed=1, window=SMALL_WINDOW)
    export_report(report, tmp_path)
    lines = (tmp_path / "cells.csv").read_text().strip().splitlines()
    assert len(lines) == 2  # header + one data row
