"""Event-loop kernel and genome-to-program compiler.

Genomes are compiled to flat postfix programs interpreted by a small stack
machine inside the JIT-compiled event loop; the trees themselves stay data.
Terminal values are exposed to programs through a per-candidate context
vector whose slot order follows the terminal catalog. Cheap slots are always
filled; the two expensive groups (queue min/max statistics and the
successive-queue work sum) are computed only when a program references them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .. import ruleset as rs

# --- program opcodes ------------------------------------------------------

OP_CONST = 0
OP_TERM = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_MAX = 6
OP_MIN = 7
OP_IF = 8

_BINOP_CODE = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV,
               "max": OP_MAX, "min": OP_MIN}

SLOT = {name: i for i, name in enumerate(rs.TERMINAL_ORDER)}
N_SLOTS = len(rs.TERMINAL_ORDER)

_S_PT = SLOT["PT"]
_S_WINQ = SLOT["WINQ"]
_S_NPT = SLOT["NPT"]
_S_U = SLOT["U"]
_S_RPT = SLOT["RPT"]
_S_S = SLOT["S"]
_S_SP = SLOT["S+"]
_S_AJ = SLOT["AJ"]
_S_AJP = SLOT["AJ+"]
_S_CR = SLOT["CR"]
_S_CRP = SLOT["CR+"]
_S_SPRPT = SLOT["S+/RPT"]
_S_PTSRPT = SLOT["PTxS/RPT"]
_S_PTCR = SLOT["PTxCR"]
_S_PTSPRPT = SLOT["PTxS+/RPT"]
_S_PTCRP = SLOT["PTxCR+"]
_S_APTQ = SLOT["APTQ"]
_S_DD = SLOT["DD"]
_S_JAT = SLOT["JAT"]
_S_JQT = SLOT["JQT"]
_S_MRT = SLOT["MRT"]
_S_MAXDDQ = SLOT["MAXDDQ"]
_S_MAXPTQ = SLOT["MAXPTQ"]
_S_MINDDQ = SLOT["MINDDQ"]
_S_MINPTQ = SLOT["MINPTQ"]
_S_NJS = SLOT["NJS"]
_S_NOL = SLOT["NOL"]
_S_NOPS = SLOT["NOPS"]
_S_ORT = SLOT["ORT"]
_S_QSC = SLOT["QSC"]
_S_QSN = SLOT["QSN"]
_S_RPTQ = SLOT["RPTQ"]
_S_RTSO = SLOT["RTSO"]
_S_TIS = SLOT["TIS"]
_S_TWK = SLOT["TWK"]
_S_WQC = SLOT["WQC"]
_S_WSQ = SLOT["WSQ"]

_QSCAN_SLOTS = frozenset({"MAXDDQ", "MAXPTQ", "MINDDQ", "MINPTQ", "RPTQ"})

# --- event log kinds ------------------------------------------------------

LOG_ARRIVE = 0
LOG_QUEUE = 1
LOG_START = 2
LOG_FINISH = 3
LOG_KIND_NAMES = ("arrive", "queue", "start", "finish")

# --- kernel status codes --------------------------------------------------

STATUS_OK = 0
STATUS_NONFINITE = 1
STATUS_EXHAUSTED = 2


@dataclass(frozen=True)
class Program:
    """Compiled genome: one postfix program per slack branch."""

    pos_ops: np.ndarray
    pos_args: np.ndarray
    neg_ops: np.ndarray
    neg_args: np.ndarray
    conditional: bool
    need_qscan: bool
    need_wsq: bool
    text: str


def _compile_expr(node, ops: list, args: list) -> None:
    if isinstance(node, rs.Terminal):
        ops.append(OP_TERM)
        args.append(float(SLOT[node.name]))
    elif isinstance(node, rs.Constant):
        ops.append(OP_CONST)
        args.append(float(node.value))
    elif isinstance(node, rs.BinOp):
        _compile_expr(node.left, ops, args)
        _compile_expr(node.right, ops, args)
        ops.append(_BINOP_CODE[node.op])
        args.append(0.0)
    elif isinstance(node, rs.IfPositive):
        _compile_expr(node.cond, ops, args)
        _compile_expr(node.then, ops, args)
        _compile_expr(node.orelse, ops, args)
        ops.append(OP_IF)
        args.append(0.0)
    else:
        raise rs.RuleError(f"not an expression node: {node!r}")


def _branch(node) -> tuple[np.ndarray, np.ndarray]:
    ops: list = []
    args: list = []
    _compile_expr(node, ops, args)
    return np.array(ops, np.int16), np.array(args, np.float64)


def compile_genome(genome: rs.Genome) -> Program:
    if isinstance(genome, rs.SlackConditioned):
        pos_ops, pos_args = _branch(genome.positive)
        neg_ops, neg_args = _branch(genome.nonpositive)
        conditional = True
    else:
        pos_ops, pos_args = _branch(genome.root)
        neg_ops, neg_args = pos_ops, pos_args
        conditional = False
    used = rs.used_terminals(genome)
    return Program(
        pos_ops, pos_args, neg_ops, neg_args, conditional,
        need_qscan=bool(used & _QSCAN_SLOTS),
        need_wsq="WSQ" in used,
        text=rs.format_rule(genome),
    )


@njit(cache=True, inline="always")
def _run_program(ops, args, ctx, stack):
    sp = 0
    for i in range(ops.shape[0]):
        op = ops[i]
        if op == OP_TERM:
            stack[sp] = ctx[np.int64(args[i])]
            sp += 1
        elif op == OP_CONST:
            stack[sp] = args[i]
            sp += 1
        elif op == OP_ADD:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] + stack[sp]
        elif op == OP_SUB:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] - stack[sp]
        elif op == OP_MUL:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] * stack[sp]
        elif op == OP_DIV:
            sp -= 1
            b = stack[sp]
            a = stack[sp - 1]
            stack[sp - 1] = 1.0 if b == 0.0 else a / b
        elif op == OP_MAX:
            sp -= 1
            if stack[sp] > stack[sp - 1]:
                stack[sp - 1] = stack[sp]
        elif op == OP_MIN:
            sp -= 1
            if stack[sp] < stack[sp - 1]:
                stack[sp - 1] = stack[sp]
        else:  # OP_IF
            sp -= 2
            if stack[sp - 1] > 0.0:
                stack[sp - 1] = stack[sp]
            else:
                stack[sp - 1] = stack[sp + 1]
    return stack[0]


@njit(cache=True, inline="always")
def _heap_push(heap_t, heap_j, n, t, j):
    i = n
    heap_t[i] = t
    heap_j[i] = j
    while i > 0:
        p = (i - 1) >> 1
        if heap_t[p] > heap_t[i] or (heap_t[p] == heap_t[i]
                                     and heap_j[p] > heap_j[i]):
            heap_t[p], heap_t[i] = heap_t[i], heap_t[p]
            heap_j[p], heap_j[i] = heap_j[i], heap_j[p]
            i = p
        else:
            break
    return n + 1


@njit(cache=True, inline="always")
def _heap_pop(heap_t, heap_j, n):
    n -= 1
    heap_t[0] = heap_t[n]
    heap_j[0] = heap_j[n]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= n:
            break
        r = l + 1
        c = l
        if r < n and (heap_t[r] < heap_t[l] or (heap_t[r] == heap_t[l]
                                                and heap_j[r] < heap_j[l])):
            c = r
        if heap_t[c] < heap_t[i] or (heap_t[c] == heap_t[i]
                                     and heap_j[c] < heap_j[i]):
            heap_t[c], heap_t[i] = heap_t[i], heap_t[c]
            heap_j[c], heap_j[i] = heap_j[i], heap_j[c]
            i = c
        else:
            break
    return n


@njit(cache=True, nogil=True)
def run_kernel(n_machines, u,
               release, due, op_off, op_machine, op_expected, op_realized,
               rpt_suffix,
               pos_ops, pos_args, neg_ops, neg_args, conditional,
               need_qscan, need_wsq,
               count_min, count_max, require_tail,
               perjob_out,
               log_time, log_kind, log_job, log_op, log_machine,
               busy_out,
               capture_dispatch, capture_ctx, capture_job,
               out):
    """Algorithm-2 event loop over one pregenerated job stream.

    The next event is the smaller of the earliest job availability and the
    earliest available machine with a non-empty queue; ties go to the machine
    branch. Dispatch scores every queued job with the compiled rule and runs
    the minimum-score job (ties: earliest queue entry, then lowest index).
    Tardiness is accumulated for jobs numbered count_min..count_max and the
    loop ends when all of them have completed.

    Returns a status code; aggregates land in `out` (mean tardiness, counted
    jobs, measurement window, error info, log length).
    """
    INF = np.inf
    n_jobs = release.shape[0]
    target = count_max - count_min + 1
    collect_perjob = perjob_out.shape[0] > 0
    log_on = log_time.shape[0] > 0

    next_op = np.zeros(n_jobs, np.int64)
    entry_time = np.zeros(n_jobs, np.float64)
    queue_job = np.empty((n_machines, n_jobs), np.int32)
    queue_len = np.zeros(n_machines, np.int64)
    queue_work = np.zeros(n_machines, np.float64)
    avail = np.zeros(n_machines, np.float64)
    last_start = np.zeros(n_machines, np.float64)
    heap_t = np.empty(n_jobs + 1, np.float64)
    heap_j = np.empty(n_jobs + 1, np.int64)
    heap_n = 0
    ctx = np.zeros(N_SLOTS, np.float64)
    stack = np.empty(64, np.float64)
    ctx[_S_U] = u

    w0_idx = count_min - 1
    if w0_idx >= n_jobs:
        w0_idx = n_jobs - 1
    w0 = release[w0_idx]
    w1 = 0.0
    clock = 0.0
    arrival_ptr = 0
    njs = 0
    counted = 0
    tard = 0.0
    nlog = 0
    ndispatch = 0
    status = STATUS_OK
    err_time = 0.0
    err_machine = -1.0
    err_job = -1.0

    while counted < target:
        # earliest job availability: next arrival or next ready operation
        t_job = INF
        j_src = np.int64(-1)
        from_arrival = False
        if heap_n > 0:
            t_job = heap_t[0]
            j_src = heap_j[0]
        if arrival_ptr < n_jobs:
            ta = release[arrival_ptr]
            if ta < t_job or (ta == t_job and arrival_ptr < j_src):
                t_job = ta
                j_src = arrival_ptr
                from_arrival = True
        # earliest available machine with work waiting
        t_m = INF
        m_star = -1
        for m in range(n_machines):
            if queue_len[m] > 0 and avail[m] < t_m:
                t_m = avail[m]
                m_star = m
        if t_job == INF and t_m == INF:
            status = STATUS_EXHAUSTED
            break

        if t_job < t_m:
            j = j_src
            if from_arrival:
                arrival_ptr += 1
                njs += 1
                if log_on:
                    log_time[nlog] = t_job
                    log_kind[nlog] = LOG_ARRIVE
                    log_job[nlog] = j + 1
                    log_op[nlog] = -1
                    log_machine[nlog] = -1
                    nlog += 1
            else:
                heap_n = _heap_pop(heap_t, heap_j, heap_n)
            clock = t_job
            k = next_op[j]
            m = op_machine[op_off[j] + k]
            queue_job[m, queue_len[m]] = np.int32(j)
            queue_len[m] += 1
            queue_work[m] += op_expected[op_off[j] + k]
            entry_time[j] = t_job
            if log_on:
                log_time[nlog] = t_job
                log_kind[nlog] = LOG_QUEUE
                log_job[nlog] = j + 1
                log_op[nlog] = k
                log_machine[nlog] = m
                nlog += 1
            continue

        m = m_star
        now = avail[m] if avail[m] > clock else clock
        clock = now
        qlen = queue_len[m]

        wqc = queue_work[m]
        ctx[_S_MRT] = now
        ctx[_S_NJS] = njs
        ctx[_S_QSC] = qlen
        ctx[_S_WQC] = wqc
        ctx[_S_APTQ] = wqc / qlen
        if need_qscan:
            maxdd = -INF
            mindd = INF
            maxpt = -INF
            minpt = INF
            rptq = 0.0
            for qi in range(qlen):
                jq = queue_job[m, qi]
                b = op_off[jq] + next_op[jq]
                pt_q = op_expected[b]
                dd_q = due[jq]
                if dd_q > maxdd:
                    maxdd = dd_q
                if dd_q < mindd:
                    mindd = dd_q
                if pt_q > maxpt:
                    maxpt = pt_q
                if pt_q < minpt:
                    minpt = pt_q
                rptq += rpt_suffix[b]
            ctx[_S_MAXDDQ] = maxdd
            ctx[_S_MINDDQ] = mindd
            ctx[_S_MAXPTQ] = maxpt
            ctx[_S_MINPTQ] = minpt
            ctx[_S_RPTQ] = rptq

        capture_here = ndispatch == capture_dispatch

        best_j = np.int64(-1)
        best_idx = -1
        best_score = INF
        best_entry = INF
        for qi in range(qlen):
            j = np.int64(queue_job[m, qi])
            k = next_op[j]
            base = op_off[j] + k
            nops = op_off[j + 1] - op_off[j]
            pt = op_expected[base]
            rpt = rpt_suffix[base]
            aj = due[j] - now
            s = aj - rpt
            if k + 1 < nops:
                nm = op_machine[base + 1]
                npt = op_expected[base + 1]
                rem = avail[nm] - now
                winq_v = queue_work[nm] + (rem if rem > 0.0 else 0.0)
                qsn = float(queue_len[nm])
            else:
                npt = 0.0
                winq_v = 0.0
                qsn = 0.0
            sp = s if s > 0.0 else 0.0
            ajp = aj if aj > 0.0 else 0.0
            cr = aj / rpt
            crp = cr if cr > 0.0 else 0.0
            ctx[_S_PT] = pt
            ctx[_S_WINQ] = winq_v
            ctx[_S_NPT] = npt
            ctx[_S_RPT] = rpt
            ctx[_S_S] = s
            ctx[_S_SP] = sp
            ctx[_S_AJ] = aj
            ctx[_S_AJP] = ajp
            ctx[_S_CR] = cr
            ctx[_S_CRP] = crp
            ctx[_S_SPRPT] = sp / rpt
            ctx[_S_PTSRPT] = pt * s / rpt
            ctx[_S_PTCR] = pt * aj / rpt
            ctx[_S_PTSPRPT] = pt * sp / rpt
            ctx[_S_PTCRP] = pt * crp
            ctx[_S_DD] = due[j]
            ctx[_S_JAT] = release[j]
            ctx[_S_JQT] = now - entry_time[j]
            ctx[_S_ORT] = entry_time[j]
            ctx[_S_NOL] = nops - k
            ctx[_S_NOPS] = nops
            ctx[_S_QSN] = qsn
            ctx[_S_RTSO] = rpt - pt
            ctx[_S_TIS] = now - release[j]
            ctx[_S_TWK] = rpt_suffix[op_off[j]]
            if need_wsq:
                wsq = 0.0
                for k2 in range(base + 1, op_off[j + 1]):
                    m2 = op_machine[k2]
                    rem2 = avail[m2] - now
                    wsq += queue_work[m2] + (rem2 if rem2 > 0.0 else 0.0)
                ctx[_S_WSQ] = wsq

            if capture_here:
                for si in range(N_SLOTS):
                    capture_ctx[qi, si] = ctx[si]
                capture_job[qi] = j + 1

            if conditional and s <= 0.0:
                score = _run_program(neg_ops, neg_args, ctx, stack)
            else:
                score = _run_program(pos_ops, pos_args, ctx, stack)
            if not np.isfinite(score):
                status = STATUS_NONFINITE
                err_time = now
                err_machine = float(m)
                err_job = float(j + 1)
                break
            et = entry_time[j]
            if score < best_score or (score == best_score and (
                    et < best_entry or (et == best_entry and j < best_j))):
                best_score = score
                best_entry = et
                best_j = j
                best_idx = qi
        if status != STATUS_OK:
            break
        ndispatch += 1

        j = best_j
        k = next_op[j]
        base = op_off[j] + k
        queue_job[m, best_idx] = queue_job[m, qlen - 1]
        queue_len[m] = qlen - 1
        queue_work[m] -= op_expected[base]
        p = op_realized[base]
        finish = now + p
        avail[m] = finish
        last_start[m] = now
        seg_lo = now if now > w0 else w0
        if finish > seg_lo:
            busy_out[m] += finish - seg_lo
        if log_on:
            log_time[nlog] = now
            log_kind[nlog] = LOG_START
            log_job[nlog] = j + 1
            log_op[nlog] = k
            log_machine[nlog] = m
            nlog += 1
            log_time[nlog] = finish
            log_kind[nlog] = LOG_FINISH
            log_job[nlog] = j + 1
            log_op[nlog] = k
            log_machine[nlog] = m
            nlog += 1
        next_op[j] = k + 1
        if k + 1 == op_off[j + 1] - op_off[j]:
            njs -= 1
            jobno = j + 1
            if count_min <= jobno <= count_max:
                t = finish - due[j]
                if t < 0.0:
                    t = 0.0
                tard += t
                if collect_perjob:
                    perjob_out[jobno - count_min] = t
                counted += 1
                if finish > w1:
                    w1 = finish
        else:
            heap_n = _heap_push(heap_t, heap_j, heap_n, finish, j)

    if status == STATUS_OK and require_tail and arrival_ptr >= n_jobs:
        # the stream must outlast the counted window to keep queues loaded
        status = STATUS_EXHAUSTED
    # trim busy segments overshooting the measurement window
    for m in range(n_machines):
        if avail[m] > w1:
            lo = last_start[m]
            if lo < w1:
                lo = w1
            if lo < w0:
                lo = w0
            over = avail[m] - lo
            if over > 0.0 and over <= busy_out[m]:
                busy_out[m] -= over

    out[0] = tard / target if counted == target else np.nan
    out[1] = counted
    out[2] = w0
    out[3] = w1
    out[4] = err_time
    out[5] = err_machine
    out[6] = err_job
    out[7] = nlog
    return status
