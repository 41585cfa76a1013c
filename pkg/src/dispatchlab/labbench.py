"""Experiment harness: instance grids, benchmark tables, rule comparisons.

Builds the training/validation/test instance grids, computes best-of
benchmark tardiness per instance under common random numbers, runs
replicated comparisons of a candidate rule against the benchmark set with
paired significance tests, and exports the CSV artifacts the comparison
tables are derived from.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import ruleset as rs
from .evolution import BenchmarkTable, relative_performance
from .simkernel import (DEFAULT_WINDOW, InstanceSpec, StreamCache,
                        compile_genome, make_simulator, replication_seed)

GRID_KINDS = ("training", "validation", "test")

_TRAINING = dict(machines=(10,), pbar=(25, 50), allowance=(3, 4, 6),
                 util=(0.85, 0.90, 0.97), cv=(0.0,))
_VALIDATION = dict(machines=(10,), pbar=(25, 50, 100),
                   allowance=(2, 3, 4, 6, 8),
                   util=(0.80, 0.85, 0.90, 0.95, 0.97), cv=(0.0,))
_CORE_ALLOWANCE = (2, 3, 4, 6, 8)
_CORE_UTIL = (0.80, 0.85, 0.90, 0.95, 0.97)
_EXTREME_ALLOWANCE = (1.3, 2, 3, 4, 6, 8, 10)
_EXTREME_UTIL = (0.70, 0.80, 0.85, 0.90, 0.95, 0.97, 0.99)


@dataclass(frozen=True)
class InstanceGrid:
    kind: str
    specs: tuple[InstanceSpec, ...]

    def __len__(self) -> int:
        return len(self.specs)


def _product(machines, pbar, allowance, util, cv):
    return [InstanceSpec(m, float(p), float(a), float(u), float(c))
            for m in machines for p in pbar for a in allowance
            for u in util for c in cv]


def build_grid(kind: str) -> InstanceGrid:
    """Instance grid for one experiment phase, lexicographically ordered.

    The test grid is not a full factorial: extreme load conditions
    (allowance 1.3 or 10, utilisation 0.70 or 0.99) appear only with ten
    machines, common processing times and deterministic durations; larger
    shops, long processing times and stochastic durations combine with the
    core allowance/utilisation values only.
    """
    kind = kind.lower()
    if kind == "training":
        specs = _product(**_TRAINING)
    elif kind == "validation":
        specs = _product(**_VALIDATION)
    elif kind == "test":
        specs = (
            # ten-machine deterministic block, extremes included
            _product((10,), (25, 50, 100), _EXTREME_ALLOWANCE,
                     _EXTREME_UTIL, (0.0,))
            # larger shops at core conditions
            + _product((20, 50, 100), (25, 50, 100), _CORE_ALLOWANCE,
                       _CORE_UTIL, (0.0,))
            # long processing times at core conditions
            + _product((10, 20, 50), (250, 500), _CORE_ALLOWANCE,
                       _CORE_UTIL, (0.0,))
            # stochastic durations at core conditions
            + _product((10,), (25, 50, 100), _CORE_ALLOWANCE, _CORE_UTIL,
                       (0.2, 0.4, 0.6, 0.8, 1.0))
        )
    else:
        raise ValueError(f"unknown grid kind {kind!r}; use {GRID_KINDS}")
    specs = sorted(set(specs), key=InstanceSpec.key)
    return InstanceGrid(kind, tuple(specs))


def export_grid_json(grid: InstanceGrid, path) -> None:
    payload = {
        "kind": grid.kind,
        "count": len(grid.specs),
        "specs": [
            {"machines": s.machines, "mean_proc_time": s.mean_proc_time,
             "allowance": s.allowance, "utilization": s.utilization,
             "cv": s.cv}
            for s in grid.specs
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Benchmark table
# ---------------------------------------------------------------------------


def benchmark_table(grid: InstanceGrid | Sequence[InstanceSpec],
                    rules: Sequence[str] = rs.BENCHMARK_RULES,
                    reps: int = 10, seed: int = 0, *,
                    window: tuple[int, int] = DEFAULT_WINDOW,
                    mapper: Callable | None = None,
                    cache: StreamCache | None = None) -> BenchmarkTable:
    """Mean tardiness of every benchmark rule on every instance.

    Replication seeds derive from (seed, instance index, replication
    index), the same assignment candidate evaluation uses, so later
    comparisons run under common random numbers.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    specs = tuple(grid.specs if isinstance(grid, InstanceGrid) else grid)
    mapper = mapper or map
    simulate = make_simulator(window, cache or StreamCache())
    programs = [
        [compile_genome(rs.resolve_rule(name, spec.utilization))
         for spec in specs]
        for name in rules
    ]
    tasks = [(r, i, k, specs[i], programs[r][i])
             for r in range(len(rules))
             for i in range(len(specs))
             for k in range(reps)]

    def run(task):
        r, i, k, spec, program = task
        return simulate(spec, program, replication_seed(seed, i, k))

    values = np.empty((len(rules), len(specs), reps))
    for (r, i, k, _, _), tbar in zip(tasks, mapper(run, tasks)):
        values[r, i, k] = tbar
    return BenchmarkTable(specs, tuple(rules), values, seed)


# ---------------------------------------------------------------------------
# Rule comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellResult:
    spec: InstanceSpec
    rule: str
    mean_tardiness: float
    per_rep: tuple[float, ...]
    bench_best: float
    bench_rule: str
    tau: float
    significant: bool
    tie: bool


@dataclass(frozen=True)
class ComparisonReport:
    rule: str
    grid_kind: str
    reps: int
    seed: int
    sig_test: str
    epsilon: float
    cells: tuple[CellResult, ...]

    def overall_tau(self) -> float:
        return float(np.exp(np.mean(np.log([c.tau for c in self.cells]))))

    def pivot(self) -> dict[tuple[float, float], float]:
        """Geometric-mean tau per (utilization, allowance) cell."""
        groups: dict[tuple[float, float], list[float]] = {}
        for c in self.cells:
            groups.setdefault(
                (c.spec.utilization, c.spec.allowance), []).append(c.tau)
        return {k: float(np.exp(np.mean(np.log(v))))
                for k, v in groups.items()}


def _significance(candidate: np.ndarray, reference: np.ndarray,
                  method: str) -> bool:
    diffs = candidate - reference
    if not np.any(diffs != 0.0):
        return False
    if method == "wilcoxon":
        result = stats.wilcoxon(candidate, reference)
    elif method == "ttest":
        result = stats.ttest_rel(candidate, reference)
    else:
        raise ValueError(f"unknown significance test {method!r}")
    p = float(result.pvalue)
    return bool(np.isfinite(p) and p < 0.05)


def compare(rule: rs.Genome | str, grid: InstanceGrid,
            bench: BenchmarkTable, reps: int, seed: int, *,
            sig_test: str = "wilcoxon", epsilon: float = 1e-4,
            label: str | None = None,
            window: tuple[int, int] = DEFAULT_WINDOW,
            mapper: Callable | None = None,
            cache: StreamCache | None = None) -> ComparisonReport:
    """Replicated comparison of one rule against the benchmark best.

    Per cell: mean tardiness over `reps` common-random-number
    replications, relative performance tau with the epsilon guard and the
    both-zero tie convention, and a two-sided paired significance test at
    the 0.05 level against the per-cell best benchmark rule.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if bench.seed != seed:
        raise ValueError(
            f"benchmark table was built with seed {bench.seed}, not {seed}; "
            "common random numbers need matching seeds")
    if len(bench.instances) != len(grid.specs) or \
            tuple(bench.instances) != tuple(grid.specs):
        raise ValueError("benchmark table does not cover this grid")
    if bench.n_reps < reps:
        raise ValueError(
            f"benchmark table has {bench.n_reps} replications, need {reps}")

    mapper = mapper or map
    simulate = make_simulator(window, cache or StreamCache())
    by_name = isinstance(rule, str)
    rule_label = label or (rule if by_name else rs.format_rule(rule))
    programs = [
        compile_genome(rs.resolve_rule(rule, spec.utilization) if by_name
                       else rule)
        for spec in grid.specs
    ]
    tasks = [(i, k) for i in range(len(grid.specs)) for k in range(reps)]

    def run(task):
        i, k = task
        return simulate(grid.specs[i], programs[i],
                        replication_seed(seed, i, k))

    values = np.empty((len(grid.specs), reps))
    for (i, k), tbar in zip(tasks, mapper(run, tasks)):
        values[i, k] = tbar

    bench_means = bench.values[:, :, :reps].mean(axis=2)
    winner_idx = bench_means.argmin(axis=0)
    cells = []
    for i, spec in enumerate(grid.specs):
        cand = values[i]
        mean = float(cand.mean())
        best = float(bench_means[winner_idx[i], i])
        winner = bench.rule_names[winner_idx[i]]
        tie = mean == 0.0 and best == 0.0
        tau = max(mean, epsilon) / max(best, epsilon)
        reference = bench.values[winner_idx[i], i, :reps]
        significant = (not tie) and _significance(cand, reference, sig_test)
        cells.append(CellResult(
            spec=spec, rule=rule_label, mean_tardiness=mean,
            per_rep=tuple(float(v) for v in cand), bench_best=best,
            bench_rule=winner, tau=float(tau), significant=significant,
            tie=tie))
    return ComparisonReport(rule_label, grid.kind, reps, seed, sig_test,
                            epsilon, tuple(cells))


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------


def _geomean(values: Sequence[float]) -> float:
    return float(np.exp(np.mean(np.log(values))))


def export_report(report: ComparisonReport, out_dir) -> list:
    """Write cells.csv (one row per instance) and summary.csv (the
    utilisation x allowance pivot with geometric-mean margins)."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells_path = out / "cells.csv"
    with open(cells_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "machines", "pbar", "allowance", "utilization", "cv", "rule",
            "reps", "mean_tardiness", "bench_best", "bench_rule", "tau",
            "significant", "tie"])
        for c in report.cells:
            s = c.spec
            writer.writerow([
                s.machines, repr(float(s.mean_proc_time)),
                repr(float(s.allowance)), repr(float(s.utilization)),
                repr(float(s.cv)), c.rule, report.reps,
                repr(c.mean_tardiness), repr(c.bench_best), c.bench_rule,
                repr(c.tau), int(c.significant), int(c.tie)])

    pivot = report.pivot()
    us = sorted({u for u, _ in pivot})
    als = sorted({a for _, a in pivot})
    summary_path = out / "summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u\\a"] + [f"{a:g}" for a in als] + ["Avg"])
        for u in us:
            row_taus = [pivot[(u, a)] for a in als if (u, a) in pivot]
            cells = [f"{pivot[(u, a)]:.4f}" if (u, a) in pivot else ""
                     for a in als]
            writer.writerow([f"{u:g}"] + cells + [f"{_geomean(row_taus):.4f}"])
        col_avgs = []
        for a in als:
            col = [pivot[(u, a)] for u in us if (u, a) in pivot]
            col_avgs.append(f"{_geomean(col):.4f}" if col else "")
        writer.writerow(["Avg"] + col_avgs
                        + [f"{report.overall_tau():.4f}"])
    return [cells_path, summary_path]
