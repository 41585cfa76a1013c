"""Job-stream generation for the dynamic shop.

All randomness of a replication lives here: the event loop itself is
deterministic once a stream is generated. A master seed is split into
independent named streams (arrivals, operation counts, routing, expected
durations, realized durations) so that changing one sampling dimension, e.g.
the uncertainty level, does not perturb the others. Each stream is consumed
element-wise, which makes generation prefix-stable: asking for more jobs
reproduces the earlier ones field for field.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numba import njit


class DomainError(ValueError):
    """Invalid instance parameter or operation argument."""


def _ops_bounds(machines: int) -> tuple[int, int]:
    # Operation counts follow U(2f, 14f) with f = |M|/10.
    f = machines / 10.0
    low = max(1, round(2.0 * f))
    high = max(low, round(14.0 * f))
    return low, high


@dataclass(frozen=True)
class InstanceSpec:
    """One shop configuration <|M|, pbar, a, u, cv>."""

    machines: int
    mean_proc_time: float
    allowance: float
    utilization: float
    cv: float = 0.0

    def __post_init__(self):
        if self.machines < 1:
            raise DomainError(f"machines must be >= 1, got {self.machines}")
        if self.mean_proc_time < 1:
            raise DomainError(
                f"mean_proc_time must be >= 1, got {self.mean_proc_time}")
        if not self.allowance > 0:
            raise DomainError(f"allowance must be > 0, got {self.allowance}")
        if not 0.0 < self.utilization < 1.0:
            raise DomainError(
                "utilization must lie in (0, 1); the arrival-rate formula "
                f"assumes a stable but loaded shop, got {self.utilization}")
        if self.cv < 0:
            raise DomainError(f"cv must be >= 0, got {self.cv}")

    @property
    def ops_low(self) -> int:
        return _ops_bounds(self.machines)[0]

    @property
    def ops_high(self) -> int:
        return _ops_bounds(self.machines)[1]

    @property
    def mean_ops(self) -> float:
        low, high = _ops_bounds(self.machines)
        return (low + high) / 2.0

    def key(self) -> tuple:
        return (self.machines, self.mean_proc_time, self.allowance,
                self.utilization, self.cv)


@dataclass(frozen=True)
class Operation:
    machine: int
    expected: float
    realized: float


@dataclass(frozen=True)
class Job:
    index: int  # arrival sequence number, 1-based
    release: float
    due: float
    ops: tuple[Operation, ...]
    next_op: int = 0


def arrival_rate(u: float, machines: int, mean_ops: float,
                 mean_proc: float) -> float:
    """Poisson arrival rate lambda = u*|M| / (nbar*pbar)."""
    if u <= 0 or machines <= 0 or mean_ops <= 0 or mean_proc <= 0:
        raise DomainError("arrival_rate arguments must all be positive")
    if u >= 1:
        raise DomainError(f"utilization must be < 1, got {u}")
    return u * machines / (mean_ops * mean_proc)


def assign_due_date(release: float, allowance: float,
                    expected_times: Sequence[float]) -> float:
    """Total Work Content due date d = r + a * sum of expected times."""
    if not allowance > 0:
        raise DomainError(f"allowance must be > 0, got {allowance}")
    if len(expected_times) == 0:
        raise DomainError("job must have at least one operation")
    return release + allowance * float(sum(expected_times))


def sample_duration(expected: float, cv: float, rng: np.random.Generator) -> float:
    """Realized duration: Gamma with mean `expected` and sd `expected*cv`.

    Uses shape 1/cv^2 and scale expected*cv^2; cv = 0 returns the expected
    time exactly.
    """
    if expected <= 0:
        raise DomainError(f"expected duration must be > 0, got {expected}")
    if cv < 0:
        raise DomainError(f"cv must be >= 0, got {cv}")
    if cv == 0.0:
        return float(expected)
    shape = 1.0 / (cv * cv)
    return float(rng.gamma(shape, expected * cv * cv))


# ---------------------------------------------------------------------------
# Batch generation (flat arrays consumed by the simulation kernel)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JobArrays:
    """A generated job stream in flat-array form.

    Operations of job j live at indices [op_off[j], op_off[j+1]) of the flat
    arrays. `rpt_suffix[i]` is the expected work of operation i plus all
    subsequent operations of its job.
    """

    n_jobs: int
    release: np.ndarray      # float64 [n_jobs], non-decreasing
    due: np.ndarray          # float64 [n_jobs]
    op_off: np.ndarray       # int64   [n_jobs + 1]
    op_machine: np.ndarray   # int32   [total_ops]
    op_expected: np.ndarray  # float64 [total_ops]
    op_realized: np.ndarray  # float64 [total_ops]
    rpt_suffix: np.ndarray   # float64 [total_ops]


def _seed_sequence(seed) -> np.random.SeedSequence:
    # Fresh copy so repeated generation spawns identical children.
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(entropy=seed.entropy,
                                      spawn_key=seed.spawn_key)
    return np.random.SeedSequence(seed)


@njit(cache=True)
def _route_from_draws(op_off, first_draw, later_draw, n_machines):
    total = later_draw.shape[0]
    machines = np.empty(total, np.int32)
    n_jobs = op_off.shape[0] - 1
    for j in range(n_jobs):
        lo = op_off[j]
        hi = op_off[j + 1]
        prev = np.int32(first_draw[j])
        machines[lo] = prev
        for i in range(lo + 1, hi):
            d = np.int32(later_draw[i])  # uniform over the other machines
            m = d if d < prev else d + np.int32(1)
            machines[i] = m
            prev = m
    return machines


def generate_job_arrays(spec: InstanceSpec, seed, n_jobs: int) -> JobArrays:
    """Generate the first `n_jobs` jobs of the (spec, seed) stream."""
    ss = _seed_sequence(seed)
    s_arrival, s_opcount, s_route, s_expected, s_realized = ss.spawn(5)
    lam = arrival_rate(spec.utilization, spec.machines, spec.mean_ops,
                       spec.mean_proc_time)

    rng = np.random.default_rng(s_arrival)
    release = np.cumsum(rng.exponential(1.0 / lam, n_jobs))

    rng = np.random.default_rng(s_opcount)
    nops = rng.integers(spec.ops_low, spec.ops_high, size=n_jobs,
                        endpoint=True)
    op_off = np.zeros(n_jobs + 1, np.int64)
    np.cumsum(nops, out=op_off[1:])
    total = int(op_off[-1])

    rng = np.random.default_rng(s_route)
    if spec.machines == 1:
        op_machine = np.zeros(total, np.int32)
    else:
        draws = rng.random(total)
        first = np.floor(draws[op_off[:-1]] * spec.machines)
        later = np.floor(draws * (spec.machines - 1))
        op_machine = _route_from_draws(op_off, first, later, spec.machines)

    rng = np.random.default_rng(s_expected)
    # two-stage Erlang with mean pbar, rounded onto the integer time grid
    op_expected = np.maximum(
        1.0, np.round(rng.gamma(2.0, spec.mean_proc_time / 2.0, total)))

    if spec.cv == 0.0:
        op_realized = op_expected.copy()
    else:
        rng = np.random.default_rng(s_realized)
        shape = 1.0 / (spec.cv * spec.cv)
        op_realized = rng.gamma(shape, op_expected * (spec.cv * spec.cv))

    job_work = np.add.reduceat(op_expected, op_off[:-1])
    due = release + spec.allowance * job_work

    # suffix sums of expected work per job
    cs = np.cumsum(op_expected)
    ends = np.repeat(cs[op_off[1:] - 1], nops)
    rpt_suffix = ends - cs + op_expected

    return JobArrays(n_jobs, release, due, op_off, op_machine.astype(np.int32),
                     op_expected, op_realized, rpt_suffix)


def arrays_from_jobs(jobs: Sequence[Job]) -> JobArrays:
    """Flat-array form of an explicit job list (for replaying fixed
    instances); jobs must be ordered by release time."""
    n = len(jobs)
    release = np.array([j.release for j in jobs], np.float64)
    if np.any(np.diff(release) < 0):
        raise DomainError("jobs must be ordered by non-decreasing release")
    due = np.array([j.due for j in jobs], np.float64)
    op_off = np.zeros(n + 1, np.int64)
    op_off[1:] = np.cumsum([len(j.ops) for j in jobs])
    machine, expected, realized = [], [], []
    for j in jobs:
        if not j.ops:
            raise DomainError(f"job {j.index} has no operations")
        for op in j.ops:
            machine.append(op.machine)
            expected.append(op.expected)
            realized.append(op.realized)
    op_expected = np.array(expected, np.float64)
    nops = np.diff(op_off)
    cs = np.cumsum(op_expected)
    ends = np.repeat(cs[op_off[1:] - 1], nops)
    rpt_suffix = ends - cs + op_expected
    return JobArrays(n, release, due, op_off, np.array(machine, np.int32),
                     op_expected, np.array(realized, np.float64), rpt_suffix)


def jobs_from_arrays(arrays: JobArrays, start: int = 0,
                     stop: int | None = None) -> list[Job]:
    stop = arrays.n_jobs if stop is None else stop
    jobs = []
    for j in range(start, stop):
        lo, hi = int(arrays.op_off[j]), int(arrays.op_off[j + 1])
        ops = tuple(
            Operation(int(arrays.op_machine[i]), float(arrays.op_expected[i]),
                      float(arrays.op_realized[i]))
            for i in range(lo, hi))
        jobs.append(Job(j + 1, float(arrays.release[j]),
                        float(arrays.due[j]), ops))
    return jobs


def generate_job_stream(spec: InstanceSpec, seed) -> Iterator[Job]:
    """Lazy job source, fully determined by (spec, seed).

    Yields jobs numbered 1, 2, 3, ... in non-decreasing release order, each
    with routing, expected and realized processing times and a due date.
    """
    n = 1024
    emitted = 0
    while True:
        arrays = generate_job_arrays(spec, seed, n)
        yield from jobs_from_arrays(arrays, emitted, n)
        emitted = n
        n *= 2
