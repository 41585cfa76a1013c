"""Dispatching-rule expression language.

A dispatching rule is a symbolic tree over shop-floor terminals and a small
operator set. When a machine frees, every queued job is scored and the job
with the lowest score is processed next. This module provides the tree
representation, the terminal catalog (with atomic size weights and the
variant sets used by the GP engine), evaluation against a dispatch-context
snapshot, size accounting, a prefix s-expression grammar, and the catalog of
benchmark and evolved rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence, Union


class RuleError(Exception):
    """Base error for the rule language."""


class CatalogError(RuleError):
    """Unknown terminal or rule name."""


class ParseError(RuleError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


# ---------------------------------------------------------------------------
# Expression trees
# ---------------------------------------------------------------------------

BINARY_OPERATORS = ("+", "-", "*", "/", "max", "min")
IF_OPERATOR = "if"


@dataclass(frozen=True)
class Terminal:
    name: str


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class IfPositive:
    """Ternary conditional: value of `then` when cond > 0, else `orelse`."""

    cond: "Node"
    then: "Node"
    orelse: "Node"


Node = Union[Terminal, Constant, BinOp, IfPositive]


@dataclass(frozen=True)
class SingleTree:
    root: Node


@dataclass(frozen=True)
class SlackConditioned:
    """Two-branch genome: `positive` scores jobs with slack > 0, `nonpositive`
    the rest. The nonpositive branch must stay free of due-date terminals."""

    positive: Node
    nonpositive: Node


Genome = Union[SingleTree, SlackConditioned]


# ---------------------------------------------------------------------------
# Dispatch context
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DispatchContext:
    """Snapshot a rule sees for one candidate job when a machine frees.

    Per-candidate attributes plus shop-level statistics. `aj` is the job
    allowance (due minus now) and may be negative; slack is derived as
    aj - rpt. Queue statistics refer to the queue being dispatched except for
    `qsn`/`winq`/`wsq`, which look at the candidate's next machine(s).
    """

    pt: float
    rpt: float
    aj: float
    winq: float = 0.0
    npt: float = 0.0
    queue_entry: float = 0.0
    release: float = 0.0
    due: float = 0.0
    ops_left: float = 1.0
    now: float = 0.0
    u: float = 0.0
    njs: float = 0.0
    qsc: float = 1.0
    qsn: float = 0.0
    aptq: float = 0.0
    maxddq: float = 0.0
    maxptq: float = 0.0
    minddq: float = 0.0
    minptq: float = 0.0
    rptq: float = 0.0
    wqc: float = 0.0
    wsq: float = 0.0
    twk: float = 0.0
    n_ops: float = 0.0

    def __post_init__(self):
        if not self.pt > 0:
            raise ValueError(f"PT must be positive, got {self.pt}")
        if self.rpt < self.pt:
            raise ValueError(f"RPT ({self.rpt}) must be >= PT ({self.pt})")
        if self.winq < 0 or self.npt < 0:
            raise ValueError("WINQ and NPT must be non-negative")
        if self.twk == 0.0:
            object.__setattr__(self, "twk", self.rpt)
        if self.n_ops == 0.0:
            object.__setattr__(self, "n_ops", self.ops_left)

    @property
    def slack(self) -> float:
        return self.aj - self.rpt


def winq(
    next_machine: int | None,
    queued_expected: Mapping[int, Sequence[float]],
    busy_remaining: Mapping[int, float],
) -> float:
    """Estimated work awaiting at a job's next machine.

    Sum of the imminent-operation expected times queued at the next machine
    plus the remaining time of the operation in process there (0 when idle).
    Returns 0 when the current operation is the job's last (`next_machine`
    is None).
    """
    if next_machine is None:
        return 0.0
    queued = sum(queued_expected.get(next_machine, ()))
    return queued + busy_remaining.get(next_machine, 0.0)


# ---------------------------------------------------------------------------
# Terminal catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TerminalInfo:
    name: str
    size: int
    description: str
    value: Callable[[DispatchContext], float]


def _pos(x: float) -> float:
    return x if x > 0.0 else 0.0


TERMINALS: dict[str, TerminalInfo] = {}


def _register(name: str, size: int, description: str, fn) -> None:
    TERMINALS[name] = TerminalInfo(name, size, description, fn)


_register("PT", 1, "Processing time of current operation", lambda c: c.pt)
_register("WINQ", 1, "Work in the next queue", lambda c: c.winq)
_register("NPT", 1, "Processing time of next operation", lambda c: c.npt)
_register("U", 1, "Shop utilisation", lambda c: c.u)
_register("RPT", 1, "Remaining processing time", lambda c: c.rpt)
_register("S", 1, "Slack of job", lambda c: c.aj - c.rpt)
_register("S+", 1, "Slack if positive", lambda c: _pos(c.aj - c.rpt))
_register("AJ", 1, "Job allowance", lambda c: c.aj)
_register("AJ+", 1, "Allowance if positive", lambda c: _pos(c.aj))
_register("CR", 3, "Critical ratio", lambda c: c.aj / c.rpt)
_register("CR+", 3, "Critical ratio if positive", lambda c: _pos(c.aj / c.rpt))
_register("S+/RPT", 3, "Relative slack if positive",
          lambda c: _pos(c.aj - c.rpt) / c.rpt)
_register("PTxS/RPT", 5, "Operation due date (using slack)",
          lambda c: c.pt * (c.aj - c.rpt) / c.rpt)
_register("PTxCR", 5, "Operation due date (using allowance)",
          lambda c: c.pt * c.aj / c.rpt)
_register("PTxS+/RPT", 5, "Operation due date (using slack) if positive",
          lambda c: c.pt * _pos(c.aj - c.rpt) / c.rpt)
_register("PTxCR+", 5, "Operation due date (using allowance) if positive",
          lambda c: c.pt * _pos(c.aj / c.rpt))
# Appendix-catalog terminals (all size one).
_register("APTQ", 1, "Average processing time of operations in current queue",
          lambda c: c.aptq)
_register("DD", 1, "Job due date", lambda c: c.due)
_register("JAT", 1, "Job arrival time", lambda c: c.release)
_register("JQT", 1, "Job queuing time", lambda c: c.now - c.queue_entry)
_register("MRT", 1, "Machine ready time", lambda c: c.now)
_register("MAXDDQ", 1, "Maximum due date among jobs in queue", lambda c: c.maxddq)
_register("MAXPTQ", 1, "Maximum processing time among operations in queue",
          lambda c: c.maxptq)
_register("MINDDQ", 1, "Minimum due date among jobs in queue", lambda c: c.minddq)
_register("MINPTQ", 1, "Minimum processing time among operations in queue",
          lambda c: c.minptq)
_register("NJS", 1, "Number of jobs in the system", lambda c: c.njs)
_register("NOL", 1, "Number of operations left", lambda c: c.ops_left)
_register("NOPS", 1, "Number of operations of the job", lambda c: c.n_ops)
_register("ORT", 1, "Operation ready time", lambda c: c.queue_entry)
_register("QSC", 1, "Queue size in current machine", lambda c: c.qsc)
_register("QSN", 1, "Queue size in the next machine", lambda c: c.qsn)
_register("RPTQ", 1, "Remaining processing time of all jobs in the queue",
          lambda c: c.rptq)
_register("RTSO", 1, "Remaining time of the successive operations",
          lambda c: c.rpt - c.pt)
_register("TIS", 1, "Time in the system", lambda c: c.now - c.release)
_register("TWK", 1, "Total expected work content of the job", lambda c: c.twk)
_register("WQC", 1, "Work in current machines' queue", lambda c: c.wqc)
_register("WSQ", 1, "Work in all successive machines' queues", lambda c: c.wsq)

TERMINAL_ORDER: tuple[str, ...] = tuple(TERMINALS)

GPBASIC = frozenset({"PT", "WINQ", "NPT", "U", "PTxS/RPT", "PTxCR"})
GPIMP = frozenset({"PT", "WINQ", "S+", "AJ+", "S+/RPT", "CR+",
                   "PTxS+/RPT", "PTxCR+", "RPT"})
GPSTRUCT_POS = GPIMP
GPSTRUCT_NONPOS = frozenset({"PT", "WINQ"})
GPLIT_A = frozenset({"APTQ", "PT", "JAT", "DD", "MRT", "NOL", "ORT",
                     "NPT", "RPT", "S", "TIS", "WINQ"})
GPLIT_B = frozenset({"APTQ", "PT", "AJ", "JQT", "MRT", "MAXDDQ", "MAXPTQ",
                     "MINDDQ", "MINPTQ", "NJS", "NOL", "NPT", "QSC", "QSN",
                     "RPT", "RPTQ", "S", "TIS", "WINQ", "WSQ"})

# Terminals carrying due-date information; none may appear in the
# nonpositive branch of a slack-conditioned genome.
DUE_DATE_TERMINALS = frozenset({
    "S", "S+", "AJ", "AJ+", "CR", "CR+", "S+/RPT", "PTxS/RPT", "PTxCR",
    "PTxS+/RPT", "PTxCR+", "RPT", "DD", "MAXDDQ", "MINDDQ",
})


@dataclass(frozen=True)
class VariantSpec:
    """Terminal and operator sets for one GP configuration."""

    name: str
    terminals: tuple[str, ...]
    operators: tuple[str, ...]
    structured: bool = False
    nonpositive_terminals: tuple[str, ...] = ()


def _ordered(names: frozenset[str]) -> tuple[str, ...]:
    return tuple(t for t in TERMINAL_ORDER if t in names)


VARIANTS: dict[str, VariantSpec] = {
    "gplit_a": VariantSpec("gplit_a", _ordered(GPLIT_A), BINARY_OPERATORS),
    "gplit_b": VariantSpec("gplit_b", _ordered(GPLIT_B),
                           BINARY_OPERATORS + (IF_OPERATOR,)),
    "gpbasic": VariantSpec("gpbasic", _ordered(GPBASIC), ("+", "-", "*", "/")),
    "gpimp": VariantSpec("gpimp", _ordered(GPIMP), ("+", "-", "*", "/")),
    "gpstruct": VariantSpec("gpstruct", _ordered(GPSTRUCT_POS),
                            ("+", "-", "*", "/"), structured=True,
                            nonpositive_terminals=_ordered(GPSTRUCT_NONPOS)),
}


def terminal_value(symbol: str, ctx: DispatchContext) -> float:
    """Value of one catalog terminal on a dispatch context."""
    info = TERMINALS.get(symbol)
    if info is None:
        raise CatalogError(f"unknown terminal: {symbol!r}")
    return info.value(ctx)


# ---------------------------------------------------------------------------
# Evaluation and size accounting
# ---------------------------------------------------------------------------


def protected_div(a: float, b: float) -> float:
    """Division with the GP convention a / 0 = 1."""
    return 1.0 if b == 0.0 else a / b


def eval_expr(node: Node, ctx: DispatchContext) -> float:
    if isinstance(node, Terminal):
        return terminal_value(node.name, ctx)
    if isinstance(node, Constant):
        return node.value
    if isinstance(node, BinOp):
        a = eval_expr(node.left, ctx)
        b = eval_expr(node.right, ctx)
        op = node.op
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return protected_div(a, b)
        if op == "max":
            return a if a > b else b
        if op == "min":
            return a if a < b else b
        raise RuleError(f"unknown operator: {op!r}")
    if isinstance(node, IfPositive):
        if eval_expr(node.cond, ctx) > 0.0:
            return eval_expr(node.then, ctx)
        return eval_expr(node.orelse, ctx)
    raise RuleError(f"not an expression node: {node!r}")


def evaluate(genome: Genome, ctx: DispatchContext) -> float:
    """Score one candidate; lower score means higher priority."""
    if isinstance(genome, SlackConditioned):
        branch = genome.positive if ctx.slack > 0.0 else genome.nonpositive
        return eval_expr(branch, ctx)
    return eval_expr(genome.root, ctx)


def expr_size(node: Node) -> int:
    if isinstance(node, Terminal):
        info = TERMINALS.get(node.name)
        if info is None:
            raise CatalogError(f"unknown terminal: {node.name!r}")
        return info.size
    if isinstance(node, Constant):
        return 1
    if isinstance(node, BinOp):
        return 1 + expr_size(node.left) + expr_size(node.right)
    return 1 + expr_size(node.cond) + expr_size(node.then) + expr_size(node.orelse)


def rule_size(genome: Genome) -> int:
    """Number of atomic parameters and operators in a genome.

    Operators and constants weigh one; terminals weigh their catalog size
    (CR counts as three: AJ, /, RPT). The slack conditional of a two-branch
    genome weighs one on top of its branches.
    """
    if isinstance(genome, SlackConditioned):
        return 1 + expr_size(genome.positive) + expr_size(genome.nonpositive)
    return expr_size(genome.root)


def expr_depth(node: Node) -> int:
    if isinstance(node, (Terminal, Constant)):
        return 1
    if isinstance(node, BinOp):
        return 1 + max(expr_depth(node.left), expr_depth(node.right))
    return 1 + max(expr_depth(node.cond), expr_depth(node.then),
                   expr_depth(node.orelse))


def genome_depth(genome: Genome) -> int:
    if isinstance(genome, SlackConditioned):
        return max(expr_depth(genome.positive), expr_depth(genome.nonpositive))
    return expr_depth(genome.root)


def iter_terminals(node: Node) -> Iterator[str]:
    if isinstance(node, Terminal):
        yield node.name
    elif isinstance(node, BinOp):
        yield from iter_terminals(node.left)
        yield from iter_terminals(node.right)
    elif isinstance(node, IfPositive):
        yield from iter_terminals(node.cond)
        yield from iter_terminals(node.then)
        yield from iter_terminals(node.orelse)


def used_terminals(genome: Genome) -> frozenset[str]:
    if isinstance(genome, SlackConditioned):
        return frozenset(iter_terminals(genome.positive)) | frozenset(
            iter_terminals(genome.nonpositive))
    return frozenset(iter_terminals(genome.root))


def check_branch_purity(genome: Genome) -> None:
    """Reject slack-conditioned genomes whose nonpositive branch uses
    due-date terminals (anything outside the {PT, WINQ} set)."""
    if not isinstance(genome, SlackConditioned):
        return
    bad = frozenset(iter_terminals(genome.nonpositive)) - GPSTRUCT_NONPOS
    if bad:
        raise RuleError(
            f"nonpositive branch uses due-date terminals: {sorted(bad)}")


# ---------------------------------------------------------------------------
# Text grammar (prefix s-expressions)
# ---------------------------------------------------------------------------

SLACK_COND_HEAD = "if-slack-pos"


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append((ch, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append((text[i:j], i))
            i = j
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def _peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _next(self):
        tok = self._peek()
        if tok is None:
            raise ParseError("unexpected end of input", len(self.text))
        self.pos += 1
        return tok

    def parse_genome(self) -> Genome:
        tok = self._peek()
        if tok is None:
            raise ParseError("empty rule", 0)
        if tok[0] == "(" and self.pos + 1 < len(self.tokens) \
                and self.tokens[self.pos + 1][0] == SLACK_COND_HEAD:
            self._next()  # (
            self._next()  # if-slack-pos
            positive = self.parse_expr()
            nonpositive = self.parse_expr()
            self._expect_close()
            self._expect_end()
            return SlackConditioned(positive, nonpositive)
        root = self.parse_expr()
        self._expect_end()
        return SingleTree(root)

    def parse_expr(self) -> Node:
        tok, at = self._next()
        if tok == ")":
            raise ParseError("unexpected ')'", at)
        if tok == "(":
            head, head_at = self._next()
            if head == SLACK_COND_HEAD:
                raise ParseError(
                    f"{SLACK_COND_HEAD!r} is genome structure and only "
                    "allowed at the top level", head_at)
            if head == IF_OPERATOR:
                cond = self.parse_expr()
                then = self.parse_expr()
                orelse = self.parse_expr()
                self._expect_close()
                return IfPositive(cond, then, orelse)
            if head in BINARY_OPERATORS:
                left = self.parse_expr()
                right = self.parse_expr()
                self._expect_close()
                return BinOp(head, left, right)
            raise ParseError(f"unknown operator {head!r}", head_at)
        return self._atom(tok, at)

    def _atom(self, tok: str, at: int) -> Node:
        try:
            return Constant(float(tok))
        except ValueError:
            pass
        if tok in TERMINALS:
            return Terminal(tok)
        raise ParseError(f"unknown terminal {tok!r}", at)

    def _expect_close(self):
        tok = self._next()
        if tok[0] != ")":
            raise ParseError(f"expected ')', got {tok[0]!r}", tok[1])

    def _expect_end(self):
        tok = self._peek()
        if tok is not None:
            raise ParseError(f"trailing input {tok[0]!r}", tok[1])


def parse_rule(text: str) -> Genome:
    """Parse a rule in the prefix s-expression grammar."""
    return _Parser(text).parse_genome()


def format_expr(node: Node) -> str:
    if isinstance(node, Terminal):
        return node.name
    if isinstance(node, Constant):
        v = node.value
        return str(int(v)) if v == int(v) and abs(v) < 1e15 else repr(v)
    if isinstance(node, BinOp):
        return f"({node.op} {format_expr(node.left)} {format_expr(node.right)})"
    return (f"(if {format_expr(node.cond)} {format_expr(node.then)} "
            f"{format_expr(node.orelse)})")


def format_rule(genome: Genome) -> str:
    """Canonical text form; parse_rule(format_rule(g)) == g."""
    if isinstance(genome, SlackConditioned):
        return (f"({SLACK_COND_HEAD} {format_expr(genome.positive)} "
                f"{format_expr(genome.nonpositive)})")
    return format_expr(genome.root)


def load_rules(path) -> list[Genome]:
    """Read a rules file: UTF-8, one rule per line, '#' comments."""
    genomes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                genomes.append(parse_rule(line))
    return genomes


# ---------------------------------------------------------------------------
# Benchmark and evolved rules
# ---------------------------------------------------------------------------

# Rules entering the tau denominator (best-of set R).
BENCHMARK_RULES = ("RR", "2PT+WINQ+NPT", "CR+SPT", "S/RPT+SPT", "PT+WINQ")


def _t(name: str) -> Terminal:
    return Terminal(name)


def _add(a: Node, b: Node) -> Node:
    return BinOp("+", a, b)


def _odd_rule(slack_split: bool) -> Node:
    """Operation-due-date rule with an SPT switch for urgent jobs.

    Each operation receives a due date at release: the critical-ratio
    flavour splits the job's flow allowance proportionally to work content,
    the slack flavour adds the work done so far plus an equal per-operation
    share of the job's total slack. While the job still has positive slack
    the candidate scores its operation due date; once the due date is close
    or passed (slack <= 0) the SPT timestamp now + PT takes over.
    """
    pt, twk, jat, dd, mrt = (_t("PT"), _t("TWK"), _t("JAT"), _t("DD"),
                             _t("MRT"))
    cum = BinOp("-", _add(twk, pt), _t("RPT"))  # work through current op
    flow = BinOp("-", dd, jat)
    if slack_split:
        slack_total = BinOp("-", flow, twk)
        position = BinOp("-", _t("NOPS"), BinOp("-", _t("NOL"), Constant(1.0)))
        odd = _add(_add(jat, cum),
                   BinOp("/", BinOp("*", slack_total, position), _t("NOPS")))
    else:
        odd = _add(jat, BinOp("/", BinOp("*", flow, cum), twk))
    return IfPositive(_t("S"), odd, _add(mrt, pt))


def benchmark_catalog(u: float) -> dict[str, Genome]:
    """Named benchmark and evolved rules.

    RR balances processing time against operation due date with weights
    exp(u) and exp(-u), fixed numeric constants computed from the shop
    utilisation at instantiation. CR+SPT and S/RPT+SPT apply the SPT
    timestamp when an operation's due date is close or passed and the
    operation due date otherwise.
    """
    pt, winq_, npt = _t("PT"), _t("WINQ"), _t("NPT")
    rr = _add(
        _add(BinOp("*", Constant(math.exp(u)), pt),
             BinOp("*", Constant(math.exp(-u)), _t("PTxS/RPT"))),
        winq_)
    r1 = _add(_add(BinOp("*", Constant(2.0), pt), _t("PTxS+/RPT")), winq_)
    r2 = SlackConditioned(
        positive=_add(_add(pt, _t("PTxCR+")), winq_),
        nonpositive=BinOp(
            "-", _add(BinOp("*", Constant(3.0), pt), winq_),
            BinOp("/", winq_, pt)),
    )
    return {
        "SPT": SingleTree(pt),
        "PT+WINQ": SingleTree(_add(pt, winq_)),
        "2PT+WINQ+NPT": SingleTree(
            _add(_add(BinOp("*", Constant(2.0), pt), winq_), npt)),
        "RR": SingleTree(rr),
        "CR+SPT": SingleTree(_odd_rule(slack_split=False)),
        "S/RPT+SPT": SingleTree(_odd_rule(slack_split=True)),
        "R1": SingleTree(r1),
        "R2": r2,
    }


def resolve_rule(name: str, u: float) -> Genome:
    """Catalog lookup by name, instantiated for shop utilisation u."""
    catalog = benchmark_catalog(u)
    if name not in catalog:
        raise CatalogError(
            f"unknown rule {name!r}; catalog has {sorted(catalog)}")
    return catalog[name]
