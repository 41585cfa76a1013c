import math
import random

import pytest

from dispatchlab import ruleset as rs
from dispatchlab.ruleset import (
    BinOp, Constant, DispatchContext, SingleTree, SlackConditioned, Terminal,
    benchmark_catalog, evaluate, format_rule, parse_rule, rule_size,
    terminal_value, winq,
)


def ctx(**kw):
    base = dict(pt=10.0, rpt=40.0, aj=60.0, winq=15.0)
    base.update(kw)
    return DispatchContext(**base)


# ---------------------------------------------------------------------------
# Terminals
# ---------------------------------------------------------------------------

def test_slack_plus_truncates_at_zero():
    c = ctx(aj=30.0, rpt=50.0, pt=10.0)
    assert terminal_value("S+", c) == 0.0  # slack -20 truncated
    assert terminal_value("S", c) == -20.0


def test_critical_ratio_positive():
    c = ctx(aj=60.0, rpt=30.0)
    assert terminal_value("CR+", c) == 2.0
    assert terminal_value("CR", c) == 2.0


def test_npt_winq_zero_on_last_operation():
    c = ctx(npt=0.0, winq=0.0)
    assert terminal_value("NPT", c) == 0.0
    assert terminal_value("WINQ", c) == 0.0


def test_unknown_terminal_raises_catalog_error():
    with pytest.raises(rs.CatalogError, match="NOPE"):
        terminal_value("NOPE", ctx())


def test_context_identity_slack():
    c = ctx(aj=37.0, rpt=12.0, pt=12.0)
    assert c.slack == 37.0 - 12.0
    assert terminal_value("S", c) == c.slack


def test_context_rejects_bad_invariants():
    with pytest.raises(ValueError):
        DispatchContext(pt=0.0, rpt=10.0, aj=1.0)
    with pytest.raises(ValueError):
        DispatchContext(pt=10.0, rpt=5.0, aj=1.0)


# ---------------------------------------------------------------------------
# WINQ estimate
# ---------------------------------------------------------------------------

def test_winq_sums_queue_and_in_process_remainder():
    assert winq(2, {2: [5.0, 7.0]}, {2: 3.0}) == 15.0


def test_winq_last_operation_is_zero():
    assert winq(None, {2: [5.0]}, {2: 3.0}) == 0.0


def test_winq_idle_empty_machine_is_zero():
    assert winq(4, {}, {}) == 0.0


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def test_r1_example_value():
    # 2PT + PT*S+/RPT + WINQ at PT=10, S=20, RPT=40, WINQ=15 -> 20 + 5 + 15
    r1 = benchmark_catalog(0.9)["R1"]
    assert evaluate(r1, ctx(pt=10, rpt=40, aj=60, winq=15)) == 40.0


def test_r2_else_branch_value():
    # 3PT + WINQ - WINQ/PT at PT=10, WINQ=20, S=-5
    r2 = benchmark_catalog(0.9)["R2"]
    c = ctx(pt=10, rpt=40, aj=35, winq=20)  # slack -5
    assert c.slack == -5.0
    assert evaluate(r2, c) == 48.0


def test_r2_positive_branch_value():
    # PT + PT*CR+ + WINQ at PT=10, AJ=60, RPT=30, WINQ=15 -> 10 + 20 + 15
    r2 = benchmark_catalog(0.9)["R2"]
    assert evaluate(r2, ctx(pt=10, rpt=30, aj=60, winq=15)) == 45.0


def test_protected_division():
    g = parse_rule("(/ PT WINQ)")
    assert evaluate(g, ctx(winq=0.0)) == 1.0
    assert evaluate(g, ctx(winq=5.0)) == 2.0


def test_if_operator_semantics():
    g = parse_rule("(if S PT WINQ)")
    assert evaluate(g, ctx(aj=60, rpt=40)) == 10.0  # slack 20 > 0
    assert evaluate(g, ctx(aj=30, rpt=40, pt=10)) == 15.0


def test_rr_matches_formula_oracle():
    # PT*exp(u) + PT*(S/RPT)*exp(-u) + WINQ computed independently.
    u, pt, s, rpt, wq = 0.9, 10.0, 20.0, 40.0, 15.0
    expected = pt * math.exp(u) + pt * (s / rpt) * math.exp(-u) + wq
    rr = benchmark_catalog(u)["RR"]
    got = evaluate(rr, ctx(pt=pt, rpt=rpt, aj=s + rpt, winq=wq))
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(41.62887941, abs=1e-6)


def test_cr_spt_switches_to_spt_when_due_close():
    rule = benchmark_catalog(0.9)["CR+SPT"]
    # operation due date passed: SPT timestamp now + PT
    late = ctx(pt=10, rpt=30, aj=-50, winq=0, release=0, due=50, now=100,
               twk=30, n_ops=3, ops_left=3)
    assert evaluate(rule, late) == 110.0
    # loose job: allowance-proportional operation due date
    # cum work 10 of 30, flow allowance 600 -> ODD = 600 * 10/30 = 200
    loose = ctx(pt=10, rpt=30, aj=500, winq=0, release=0, due=600, now=100,
                twk=30, n_ops=3, ops_left=3)
    assert evaluate(rule, loose) == 200.0


def test_srpt_spt_switches_to_spt_when_due_close():
    rule = benchmark_catalog(0.9)["S/RPT+SPT"]
    late = ctx(pt=10, rpt=30, aj=-50, winq=0, release=0, due=50, now=100,
               twk=30, n_ops=3, ops_left=3)
    assert evaluate(rule, late) == 110.0
    # loose: work done (10) plus first of three equal slack shares (190)
    loose = ctx(pt=10, rpt=30, aj=500, winq=0, release=0, due=600, now=100,
                twk=30, n_ops=3, ops_left=3)
    assert evaluate(rule, loose) == 200.0


# ---------------------------------------------------------------------------
# Size accounting
# ---------------------------------------------------------------------------

def test_terminal_sizes_from_catalog():
    assert rule_size(SingleTree(Terminal("CR"))) == 3
    assert rule_size(SingleTree(Terminal("PTxCR"))) == 5
    assert rule_size(SingleTree(Terminal("PT"))) == 1


def test_r1_size_is_11():
    assert rule_size(benchmark_catalog(0.9)["R1"]) == 11


def test_r2_simplified_size_is_19():
    assert rule_size(benchmark_catalog(0.9)["R2"]) == 19


def test_r2_unsimplified_fixture_size_is_31():
    # A pre-simplification form of R2: PT*(S+/S+) + PT*CR+ + WINQ*(PT/PT)
    # over slack>0, else 3PT + WINQ*(PT/PT) - WINQ/PT. Hand-simplifying
    # (x/x -> 1, 1*x -> x) yields the published R2 of size 19.
    text = ("(if-slack-pos "
            "(+ (+ (* PT (/ S+ S+)) (* PT CR+)) (* WINQ (/ PT PT))) "
            "(- (+ (* 3 PT) (* WINQ (/ PT PT))) (/ WINQ PT)))")
    g = parse_rule(text)
    assert rule_size(g) == 31


def test_gplit_terminals_all_size_one():
    for name in rs.GPLIT_A | rs.GPLIT_B:
        assert rs.TERMINALS[name].size == 1


def test_table_sizes():
    sizes = {"PT": 1, "WINQ": 1, "NPT": 1, "U": 1, "S+": 1, "AJ+": 1,
             "RPT": 1, "S+/RPT": 3, "CR+": 3, "PTxS/RPT": 5, "PTxCR": 5,
             "PTxS+/RPT": 5, "PTxCR+": 5}
    for name, size in sizes.items():
        assert rs.TERMINALS[name].size == size


# ---------------------------------------------------------------------------
# Catalog sets
# ---------------------------------------------------------------------------

def test_variant_set_memberships():
    assert rs.GPSTRUCT_NONPOS == frozenset({"PT", "WINQ"})
    assert rs.GPBASIC == frozenset(
        {"PT", "WINQ", "NPT", "U", "PTxS/RPT", "PTxCR"})
    assert len(rs.GPLIT_A) == 12
    assert len(rs.GPLIT_B) == 20
    # rows with no mark in either column stay out of both sets
    assert "RTSO" not in rs.GPLIT_A | rs.GPLIT_B
    assert "WQC" not in rs.GPLIT_A | rs.GPLIT_B
    assert "RTSO" in rs.TERMINALS and "WQC" in rs.TERMINALS


def test_branch_purity_check():
    good = benchmark_catalog(0.9)["R2"]
    rs.check_branch_purity(good)
    bad = SlackConditioned(Terminal("PT"), Terminal("S+"))
    with pytest.raises(rs.RuleError, match="S\\+"):
        rs.check_branch_purity(bad)


# ---------------------------------------------------------------------------
# Grammar round-trips
# ---------------------------------------------------------------------------

def test_parse_format_round_trip():
    text = "(+ (* 2 PT) WINQ)"
    g = parse_rule(text)
    assert format_rule(g) == text
    assert parse_rule(format_rule(g)) == g


def test_parse_slack_conditioned():
    g = parse_rule("(if-slack-pos (+ PT WINQ) (+ (* 3 PT) WINQ))")
    assert isinstance(g, SlackConditioned)
    assert format_rule(g) == "(if-slack-pos (+ PT WINQ) (+ (* 3 PT) WINQ))"


def test_parse_error_names_unknown_terminal():
    with pytest.raises(rs.ParseError, match="UNKNOWN"):
        parse_rule("(/ PT UNKNOWN)")


def test_parse_error_reports_position():
    with pytest.raises(rs.ParseError) as err:
        parse_rule("(+ PT")
    assert err.value.position == 5


def test_nested_slack_conditional_rejected():
    with pytest.raises(rs.ParseError, match="if-slack-pos"):
        parse_rule("(+ (if-slack-pos PT WINQ) PT)")


def test_catalog_round_trips():
    for name, genome in benchmark_catalog(0.97).items():
        assert parse_rule(format_rule(genome)) == genome, name


def test_rules_file_loading(tmp_path):
    p = tmp_path / "rules.txt"
    p.write_text("# a comment\n(+ PT WINQ)\nPT  # trailing comment\n",
                 encoding="utf-8")
    rules = rs.load_rules(p)
    assert rules == [SingleTree(BinOp("+", Terminal("PT"), Terminal("WINQ"))),
                     SingleTree(Terminal("PT"))]


# ---------------------------------------------------------------------------
# Properties (seeded randomized checks)
# ---------------------------------------------------------------------------

def random_context(rng):
    pt = rng.uniform(1.0, 100.0)
    rpt = pt + rng.uniform(0.0, 400.0)
    return ctx(
        pt=pt, rpt=rpt,
        aj=rng.uniform(-500.0, 1000.0),
        winq=rng.uniform(0.0, 500.0),
        npt=rng.choice([0.0, rng.uniform(1.0, 100.0)]),
        queue_entry=rng.uniform(0.0, 50.0),
        release=rng.uniform(0.0, 20.0),
        due=rng.uniform(0.0, 2000.0),
        ops_left=rng.randint(1, 14),
        now=rng.uniform(50.0, 150.0),
        u=rng.uniform(0.5, 0.99),
        njs=rng.randint(0, 60),
        qsc=rng.randint(1, 12),
        qsn=rng.randint(0, 12),
        aptq=rng.uniform(0.0, 100.0),
        maxddq=rng.uniform(0.0, 2000.0),
        maxptq=rng.uniform(0.0, 100.0),
        minddq=rng.uniform(0.0, 2000.0),
        minptq=rng.uniform(0.0, 100.0),
        rptq=rng.uniform(0.0, 2000.0),
        wqc=rng.uniform(0.0, 500.0),
        wsq=rng.uniform(0.0, 2000.0),
    )


def random_expr(rng, terminals, depth):
    if depth <= 1 or rng.random() < 0.3:
        if rng.random() < 0.15:
            return Constant(float(rng.randint(1, 9)))
        return Terminal(rng.choice(terminals))
    op = rng.choice(rs.BINARY_OPERATORS)
    return BinOp(op, random_expr(rng, terminals, depth - 1),
                 random_expr(rng, terminals, depth - 1))


def test_protected_division_totality():
    # Random trees on random contexts never produce NaN or infinity.
    rng = random.Random(20240811)
    terminals = list(rs.TERMINAL_ORDER)
    for _ in range(300):
        g = SingleTree(random_expr(rng, terminals, rng.randint(1, 6)))
        c = random_context(rng)
        assert math.isfinite(evaluate(g, c)), format_rule(g)


def test_priority_scale_invariance():
    # Multiplying a genome's score by a positive constant keeps the argmin.
    rng = random.Random(7)
    terminals = list(rs.TERMINAL_ORDER)
    for _ in range(60):
        g = SingleTree(random_expr(rng, terminals, rng.randint(2, 5)))
        scale = SingleTree(BinOp("*", Constant(rng.uniform(0.1, 40.0)),
                                 g.root))
        candidates = [random_context(rng) for _ in range(6)]
        base = min(range(6), key=lambda i: evaluate(g, candidates[i]))
        scaled = min(range(6), key=lambda i: evaluate(scale, candidates[i]))
        assert base == scaled


def test_r1_r2_rank_identically_on_positive_slack():
    # For contexts where every candidate has positive slack, the identity
    # PT*(2 + S/RPT) = PT*(1 + CR) makes R1 and R2 order jobs the same way.
    rng = random.Random(99)
    cat = benchmark_catalog(0.9)
    r1, r2 = cat["R1"], cat["R2"]
    for _ in range(80):
        cands = []
        for _ in range(5):
            c = random_context(rng)
            if c.slack <= 0:
                c = ctx(pt=c.pt, rpt=c.rpt, aj=c.rpt + rng.uniform(1, 300),
                        winq=c.winq)
            cands.append(c)
        assert all(c.slack > 0 for c in cands)
        order1 = sorted(range(5), key=lambda i: (evaluate(r1, cands[i]), i))
        order2 = sorted(range(5), key=lambda i: (evaluate(r2, cands[i]), i))
        assert order1 == order2
