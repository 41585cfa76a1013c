"""Discrete-event simulator of a dynamic job shop.

Jobs arrive in a Poisson stream, visit machines per their routing, and are
sequenced by a dispatching rule whenever a machine frees; the result is the
mean tardiness over the counted-job window (jobs 501..2500 by default, with
the first 500 as warm-up). A single run is strictly sequential and a pure
function of (spec, rule, seed, window); runs are safe to execute in parallel
because the kernel releases the GIL and shares no mutable state.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .. import ruleset as rs
from . import _engine
from ._engine import (LOG_KIND_NAMES, N_SLOTS, SLOT, STATUS_EXHAUSTED,
                      STATUS_NONFINITE, Program, compile_genome)
from ._streams import (DomainError, InstanceSpec, Job, JobArrays, Operation,
                       arrival_rate, arrays_from_jobs, assign_due_date,
                       generate_job_arrays, generate_job_stream,
                       jobs_from_arrays, sample_duration)

__all__ = [
    "DEFAULT_WINDOW", "DomainError", "Event", "InstanceSpec", "Job",
    "JobArrays", "Operation", "Program", "SimResult", "SimulationError",
    "StreamCache", "arrays_from_jobs", "arrival_rate", "assign_due_date",
    "compile_genome", "export_event_log", "generate_job_arrays",
    "generate_job_stream", "jobs_from_arrays", "make_simulator",
    "mean_tardiness", "replication_seed", "sample_duration", "simulate",
    "simulate_arrays", "simulate_jobs",
]

DEFAULT_WINDOW = (501, 2500)


class SimulationError(RuntimeError):
    """Rule evaluation failed during a run (non-finite score)."""


class Event(NamedTuple):
    time: float
    kind: str  # arrive | queue | start | finish
    job: int  # 1-based arrival number
    op_index: int  # 0-based; -1 for arrive events
    machine: int  # -1 for arrive events


@dataclass(frozen=True)
class SimResult:
    """Outcome of one replication."""

    mean_tardiness: float
    counted_jobs: int
    per_job_tardiness: tuple[float, ...] | None = None
    measured_utilization: tuple[float, ...] = ()
    event_log: tuple[Event, ...] | None = None


def mean_tardiness(completions: Sequence[tuple[float, float]]) -> float:
    """Arithmetic mean of max(0, c - d) over (completion, due) pairs."""
    if len(completions) == 0:
        raise DomainError("mean_tardiness needs at least one completion")
    return sum(max(0.0, c - d) for c, d in completions) / len(completions)


def replication_seed(base_seed: int, cell_index: int,
                     rep_index: int) -> np.random.SeedSequence:
    """Deterministic per-(cell, replication) master seed; assignment is by
    index so parallel execution order cannot perturb results."""
    return np.random.SeedSequence(entropy=base_seed,
                                  spawn_key=(cell_index, rep_index))


def _initial_jobs(spec: InstanceSpec, window: tuple[int, int]) -> int:
    # Enough arrivals to outlast the counted window; congested shops hold
    # more in-flight jobs, so the buffer grows with 1/(1-u).
    buffer = 400 + int(25.0 / (1.0 - spec.utilization))
    return window[1] + buffer


def _empty_f64() -> np.ndarray:
    return np.empty(0, np.float64)


def _empty_i32() -> np.ndarray:
    return np.empty(0, np.int32)


def simulate_arrays(
    arrays: JobArrays,
    spec: InstanceSpec,
    program: Program,
    window: tuple[int, int] = DEFAULT_WINDOW,
    *,
    per_job: bool = False,
    event_log: bool = False,
    capture_dispatch: int = -1,
    require_tail: bool = True,
):
    """Run the kernel over a pregenerated stream.

    Returns (status, tbar, extras) where extras carries the optional
    per-job tardiness, busy times, window bounds, log arrays and captured
    dispatch contexts. Low-level fast path; most callers want simulate().
    """
    count_min, count_max = window
    if not 1 <= count_min <= count_max:
        raise DomainError(f"bad counted-job window {window}")
    target = count_max - count_min + 1
    perjob = np.zeros(target, np.float64) if per_job else _empty_f64()
    if event_log:
        cap = int(arrays.n_jobs + 3 * arrays.op_off[-1])
        log_time = np.empty(cap, np.float64)
        log_kind = np.empty(cap, np.int32)
        log_job = np.empty(cap, np.int32)
        log_op = np.empty(cap, np.int32)
        log_machine = np.empty(cap, np.int32)
    else:
        log_time = _empty_f64()
        log_kind = log_job = log_op = log_machine = _empty_i32()
    if capture_dispatch >= 0:
        capture_ctx = np.full((arrays.n_jobs, N_SLOTS), np.nan)
        capture_job = np.full(arrays.n_jobs, -1, np.int64)
    else:
        capture_ctx = np.empty((0, N_SLOTS))
        capture_job = np.empty(0, np.int64)
    busy = np.zeros(spec.machines, np.float64)
    out = np.zeros(8, np.float64)

    status = _engine.run_kernel(
        spec.machines, spec.utilization,
        arrays.release, arrays.due, arrays.op_off, arrays.op_machine,
        arrays.op_expected, arrays.op_realized, arrays.rpt_suffix,
        program.pos_ops, program.pos_args, program.neg_ops, program.neg_args,
        program.conditional, program.need_qscan, program.need_wsq,
        count_min, count_max, require_tail,
        perjob,
        log_time, log_kind, log_job, log_op, log_machine,
        busy,
        capture_dispatch, capture_ctx, capture_job,
        out)

    extras = {
        "per_job": perjob if per_job else None,
        "busy": busy,
        "w0": out[2],
        "w1": out[3],
        "err": (out[4], int(out[5]), int(out[6])),
        "n_log": int(out[7]),
        "log": (log_time, log_kind, log_job, log_op, log_machine),
        "capture": (capture_ctx, capture_job),
    }
    return status, float(out[0]), extras


def _raise_for_status(status, program, extras):
    if status == STATUS_NONFINITE:
        t, m, j = extras["err"]
        raise SimulationError(
            f"rule {program.text!r} produced a non-finite score at "
            f"time {t:.6g} on machine {m} scoring job {j}")


def _events_from_extras(extras) -> tuple[Event, ...]:
    lt, lk, lj, lo, lm = extras["log"]
    return tuple(
        Event(float(lt[i]), LOG_KIND_NAMES[lk[i]], int(lj[i]), int(lo[i]),
              int(lm[i]))
        for i in range(extras["n_log"]))


def simulate(
    spec: InstanceSpec,
    rule: rs.Genome,
    seed,
    window: tuple[int, int] = DEFAULT_WINDOW,
    *,
    per_job: bool = False,
    event_log: bool = False,
) -> SimResult:
    """Simulate one replication of `spec` under `rule`.

    The result is fully determined by (spec, rule, seed, window). Raises
    SimulationError if the rule ever scores a job non-finite.
    """
    program = compile_genome(rule)
    n = _initial_jobs(spec, window)
    while True:
        arrays = generate_job_arrays(spec, seed, n)
        status, tbar, extras = simulate_arrays(
            arrays, spec, program, window, per_job=per_job,
            event_log=event_log)
        if status != STATUS_EXHAUSTED:
            break
        n *= 2  # stream ended before the counted window completed
    _raise_for_status(status, program, extras)

    width = extras["w1"] - extras["w0"]
    util = tuple(extras["busy"] / width) if width > 0 else ()
    return SimResult(
        mean_tardiness=tbar,
        counted_jobs=window[1] - window[0] + 1,
        per_job_tardiness=tuple(extras["per_job"]) if per_job else None,
        measured_utilization=util,
        event_log=_events_from_extras(extras) if event_log else None,
    )


def simulate_jobs(
    jobs: Sequence[Job],
    machines: int,
    rule: rs.Genome,
    window: tuple[int, int] | None = None,
    *,
    utilization: float = 0.5,
    per_job: bool = False,
    event_log: bool = False,
    capture_dispatch: int = -1,
):
    """Replay an explicit job list (fixed micro-instances, trace tests).

    The window defaults to all jobs. Returns (SimResult, capture); capture
    holds the context snapshot of dispatch number `capture_dispatch` as a
    (slot matrix, job ids) pair, or None when not requested.
    """
    arrays = arrays_from_jobs(jobs)
    if window is None:
        window = (1, len(jobs))
    spec = InstanceSpec(machines, max(1.0, float(np.mean(arrays.op_expected))),
                        1.0, utilization, 0.0)
    program = compile_genome(rule)
    status, tbar, extras = simulate_arrays(
        arrays, spec, program, window, per_job=per_job, event_log=event_log,
        capture_dispatch=capture_dispatch, require_tail=False)
    if status == STATUS_EXHAUSTED:
        raise DomainError("job list ended before the counted window completed")
    _raise_for_status(status, program, extras)
    width = extras["w1"] - extras["w0"]
    result = SimResult(
        mean_tardiness=tbar,
        counted_jobs=window[1] - window[0] + 1,
        per_job_tardiness=tuple(extras["per_job"]) if per_job else None,
        measured_utilization=tuple(extras["busy"] / width) if width > 0 else (),
        event_log=_events_from_extras(extras) if event_log else None,
    )
    capture = None
    if capture_dispatch >= 0:
        ctx_mat, jobs_cap = extras["capture"]
        mask = jobs_cap >= 0
        capture = (ctx_mat[mask], jobs_cap[mask])
    return result, capture


def export_event_log(events: Sequence[Event], path) -> None:
    """CSV trace: (time, event_kind, job, op_index, machine)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "event_kind", "job", "op_index", "machine"])
        for ev in events:
            writer.writerow([repr(ev.time), ev.kind, ev.job, ev.op_index,
                             ev.machine])


class StreamCache:
    """Thread-safe cache of generated job streams.

    Evaluation loops hit the same (spec, seed) stream once per individual;
    caching the arrays amortizes generation across a whole population.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._streams: dict[tuple, JobArrays] = {}

    @staticmethod
    def _key(spec: InstanceSpec, seed) -> tuple:
        if isinstance(seed, np.random.SeedSequence):
            seed_key = (seed.entropy, tuple(seed.spawn_key))
        else:
            seed_key = (int(seed), ())
        return spec.key() + seed_key

    def get(self, spec: InstanceSpec, seed, min_jobs: int) -> JobArrays:
        key = self._key(spec, seed)
        with self._lock:
            arrays = self._streams.get(key)
        if arrays is not None and arrays.n_jobs >= min_jobs:
            return arrays
        arrays = generate_job_arrays(spec, seed, min_jobs)
        with self._lock:
            self._streams[key] = arrays
        return arrays


def make_simulator(window: tuple[int, int] = DEFAULT_WINDOW,
                   cache: StreamCache | None = None):
    """Build a `simulate(spec, genome, seed) -> mean tardiness` callable.

    This is the form the evolution engine and the experiment harness plug
    in. Streams come from a shared cache and the kernel call releases the
    GIL, so the callable maps cleanly over a thread pool. Genomes may be
    passed pre-compiled (a Program) to skip recompilation in hot loops.
    """
    cache = cache or StreamCache()

    def run(spec: InstanceSpec, genome, seed) -> float:
        program = genome if isinstance(genome, Program) else compile_genome(genome)
        n = _initial_jobs(spec, window)
        while True:
            arrays = cache.get(spec, seed, n)
            status, tbar, extras = simulate_arrays(arrays, spec, program,
                                                   window)
            if status != STATUS_EXHAUSTED:
                break
            n = arrays.n_jobs * 2
        _raise_for_status(status, program, extras)
        return tbar

    return run
