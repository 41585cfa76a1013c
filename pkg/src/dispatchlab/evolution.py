"""Genetic-programming engine for dispatching rules.

Generational loop with ramped half-and-half initialization, two-stage
fitness evaluation (cheap screening of the whole population, full
replication count for the surviving half), relative-performance fitness
against a benchmark table under common random numbers, bloat-penalized
selection, and crossover/mutation breeding with tournament parents.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ruleset as rs
from .ruleset import (BinOp, Constant, Genome, IfPositive, SingleTree,
                      SlackConditioned, Terminal, VariantSpec, format_rule,
                      rule_size)
from .simkernel import InstanceSpec, compile_genome, replication_seed

MUTATION_GROW_DEPTH = 4
DEPTH_RETRY_LIMIT = 5


@dataclass
class GpConfig:
    """Engine parameters; defaults follow the reference configuration."""

    population: int = 200
    generations: int = 50
    tournament: int = 2
    max_depth: int = 17
    p_crossover: float = 0.2
    p_mutation: float = 0.8
    init_depth: tuple[int, int] = (2, 6)
    p_pick_terminal: float = 0.1
    bloat_rho: float = 1e-4
    variant: str = "gpstruct"
    n1: int = 2
    n2: int = 10
    epsilon: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if abs(self.p_crossover + self.p_mutation - 1.0) > 1e-9:
            raise ValueError("crossover and mutation probabilities must sum to 1")
        for name in ("population", "generations", "tournament", "max_depth",
                     "n1", "n2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.bloat_rho < 0:
            raise ValueError("bloat_rho must be non-negative")
        if self.variant not in rs.VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; pick one of "
                f"{sorted(rs.VARIANTS)}")
        lo, hi = self.init_depth
        if not 1 <= lo <= hi:
            raise ValueError(f"bad init_depth ramp {self.init_depth}")

    @property
    def variant_spec(self) -> VariantSpec:
        return rs.VARIANTS[self.variant]


@dataclass
class Individual:
    genome: Genome
    tau: float | None = None
    fitness: float | None = None
    eval_stage: int = 0
    size: int = field(init=False)

    def __post_init__(self):
        self.size = rule_size(self.genome)


@dataclass(frozen=True)
class BenchmarkTable:
    """Per-instance benchmark tardiness under common random numbers.

    `values[r, i, k]` is the mean tardiness of benchmark rule r on instance
    i under replication seed k; the seeds derive from `seed` by
    (instance index, replication index), the same convention candidate
    evaluation uses.
    """

    instances: tuple[InstanceSpec, ...]
    rule_names: tuple[str, ...]
    values: np.ndarray
    seed: int

    def best_means(self, reps: int | None = None) -> np.ndarray:
        """Best (lowest) benchmark mean tardiness per instance, averaging
        the first `reps` replications."""
        reps = self.values.shape[2] if reps is None else reps
        return self.values[:, :, :reps].mean(axis=2).min(axis=0)

    def winners(self, reps: int | None = None) -> tuple[str, ...]:
        reps = self.values.shape[2] if reps is None else reps
        idx = self.values[:, :, :reps].mean(axis=2).argmin(axis=0)
        return tuple(self.rule_names[i] for i in idx)

    @property
    def n_reps(self) -> int:
        return self.values.shape[2]


# ---------------------------------------------------------------------------
# Fitness math
# ---------------------------------------------------------------------------


def relative_performance(candidate_means: Sequence[float],
                         benchmark_best: Sequence[float],
                         epsilon: float) -> float:
    """Geometric mean of the per-instance tardiness ratios.

    Each ratio guards both sides with epsilon so that zero-tardiness
    instances compare as ties instead of dividing by zero.
    """
    cand = np.asarray(candidate_means, dtype=float)
    bench = np.asarray(benchmark_best, dtype=float)
    if cand.shape != bench.shape or cand.ndim != 1 or cand.size == 0:
        raise ValueError(
            f"candidate means {cand.shape} do not match benchmark "
            f"instances {bench.shape}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    ratios = np.maximum(cand, epsilon) / np.maximum(bench, epsilon)
    return float(np.exp(np.mean(np.log(ratios))))


def fitness(tau: float, size: int, generation: int, rho: float) -> float:
    """Bloat-penalized fitness: tau plus size * generation * rho."""
    return tau + size * generation * rho


# ---------------------------------------------------------------------------
# Random trees
# ---------------------------------------------------------------------------


def _random_terminal(rng, terminals: Sequence[str]) -> Terminal:
    return Terminal(terminals[int(rng.integers(len(terminals)))])


def _node_for_op(op: str, children: list) -> rs.Node:
    if op == rs.IF_OPERATOR:
        return IfPositive(*children)
    return BinOp(op, children[0], children[1])


def _arity(op: str) -> int:
    return 3 if op == rs.IF_OPERATOR else 2


def grow_tree(rng, terminals: Sequence[str], operators: Sequence[str],
              max_depth: int, min_depth: int = 1) -> rs.Node:
    """Grow method: node kinds drawn uniformly, variable shape."""
    def build(level: int) -> rs.Node:
        at_max = level >= max_depth
        must_branch = level < min_depth
        if at_max or (not must_branch
                      and rng.random() < len(terminals)
                      / (len(terminals) + len(operators))):
            return _random_terminal(rng, terminals)
        op = operators[int(rng.integers(len(operators)))]
        return _node_for_op(op, [build(level + 1) for _ in range(_arity(op))])

    return build(1)


def full_tree(rng, terminals: Sequence[str], operators: Sequence[str],
              depth: int) -> rs.Node:
    """Full method: every root-to-terminal path has the target depth."""
    def build(level: int) -> rs.Node:
        if level >= depth:
            return _random_terminal(rng, terminals)
        op = operators[int(rng.integers(len(operators)))]
        return _node_for_op(op, [build(level + 1) for _ in range(_arity(op))])

    return build(1)


def _ramped_branch(rng, cfg: GpConfig, terminals: Sequence[str]) -> rs.Node:
    lo, hi = cfg.init_depth
    depth = int(rng.integers(lo, hi + 1))
    ops = cfg.variant_spec.operators
    if rng.random() < 0.5:
        return full_tree(rng, terminals, ops, depth)
    return grow_tree(rng, terminals, ops, depth, min_depth=min(2, depth))


def random_genome(cfg: GpConfig, rng) -> Genome:
    spec = cfg.variant_spec
    if spec.structured:
        return SlackConditioned(
            positive=_ramped_branch(rng, cfg, spec.terminals),
            nonpositive=_ramped_branch(rng, cfg, spec.nonpositive_terminals))
    return SingleTree(_ramped_branch(rng, cfg, spec.terminals))


def init_population(cfg: GpConfig, rng) -> list[Individual]:
    """Ramped half-and-half population of cfg.population individuals."""
    return [Individual(random_genome(cfg, rng)) for _ in range(cfg.population)]


# ---------------------------------------------------------------------------
# Breeding
# ---------------------------------------------------------------------------


def _collect_nodes(node: rs.Node, path: tuple = ()) -> list[tuple[tuple, rs.Node]]:
    out = [(path, node)]
    if isinstance(node, BinOp):
        out += _collect_nodes(node.left, path + (0,))
        out += _collect_nodes(node.right, path + (1,))
    elif isinstance(node, IfPositive):
        out += _collect_nodes(node.cond, path + (0,))
        out += _collect_nodes(node.then, path + (1,))
        out += _collect_nodes(node.orelse, path + (2,))
    return out


def _replace_at(node: rs.Node, path: tuple, subtree: rs.Node) -> rs.Node:
    if not path:
        return subtree
    head, rest = path[0], path[1:]
    if isinstance(node, BinOp):
        if head == 0:
            return BinOp(node.op, _replace_at(node.left, rest, subtree),
                         node.right)
        return BinOp(node.op, node.left,
                     _replace_at(node.right, rest, subtree))
    if isinstance(node, IfPositive):
        parts = [node.cond, node.then, node.orelse]
        parts[head] = _replace_at(parts[head], rest, subtree)
        return IfPositive(*parts)
    raise rs.RuleError("path descends into a leaf")


def _subtree_at(node: rs.Node, path: tuple) -> rs.Node:
    for head in path:
        if isinstance(node, BinOp):
            node = node.left if head == 0 else node.right
        elif isinstance(node, IfPositive):
            node = (node.cond, node.then, node.orelse)[head]
        else:
            raise rs.RuleError("path descends into a leaf")
    return node


def pick_node(rng, root: rs.Node, p_terminal: float) -> tuple:
    """Biased node pick: non-terminals with probability 1 - p_terminal,
    falling back to whatever kinds exist."""
    nodes = _collect_nodes(root)
    leaves = [p for p, n in nodes if isinstance(n, (Terminal, Constant))]
    inner = [p for p, n in nodes if not isinstance(n, (Terminal, Constant))]
    want_leaf = rng.random() < p_terminal
    pool = leaves if (want_leaf and leaves) or not inner else inner
    return pool[int(rng.integers(len(pool)))]


def _branches(genome: Genome) -> list[rs.Node]:
    if isinstance(genome, SlackConditioned):
        return [genome.positive, genome.nonpositive]
    return [genome.root]


def _with_branch(genome: Genome, slot: int, root: rs.Node) -> Genome:
    if isinstance(genome, SlackConditioned):
        if slot == 0:
            return SlackConditioned(root, genome.nonpositive)
        return SlackConditioned(genome.positive, root)
    return SingleTree(root)


def crossover(parent_a: Individual, parent_b: Individual, cfg: GpConfig,
              rng) -> tuple[Individual, Individual]:
    """Subtree exchange; slack-conditioned genomes swap within one
    uniformly chosen branch slot so catalogs stay aligned."""
    ga, gb = parent_a.genome, parent_b.genome
    structured = isinstance(ga, SlackConditioned)
    slot = int(rng.integers(2)) if structured else 0
    root_a = _branches(ga)[slot]
    root_b = _branches(gb)[slot]
    for _ in range(DEPTH_RETRY_LIMIT):
        path_a = pick_node(rng, root_a, cfg.p_pick_terminal)
        path_b = pick_node(rng, root_b, cfg.p_pick_terminal)
        sub_a = _subtree_at(root_a, path_a)
        sub_b = _subtree_at(root_b, path_b)
        new_a = _with_branch(ga, slot, _replace_at(root_a, path_a, sub_b))
        new_b = _with_branch(gb, slot, _replace_at(root_b, path_b, sub_a))
        if rs.genome_depth(new_a) <= cfg.max_depth \
                and rs.genome_depth(new_b) <= cfg.max_depth:
            return Individual(new_a), Individual(new_b)
    return Individual(ga), Individual(gb)


def mutate(parent: Individual, cfg: GpConfig, rng) -> Individual:
    """Replace a biased-picked subtree with a freshly grown one from the
    branch's terminal catalog."""
    genome = parent.genome
    spec = cfg.variant_spec
    structured = isinstance(genome, SlackConditioned)
    slot = int(rng.integers(2)) if structured else 0
    terminals = (spec.nonpositive_terminals if structured and slot == 1
                 else spec.terminals)
    root = _branches(genome)[slot]
    for _ in range(DEPTH_RETRY_LIMIT):
        path = pick_node(rng, root, cfg.p_pick_terminal)
        sub = grow_tree(rng, terminals, spec.operators, MUTATION_GROW_DEPTH)
        new_root = _replace_at(root, path, sub)
        if rs.expr_depth(new_root) <= cfg.max_depth:
            return Individual(_with_branch(genome, slot, new_root))
    return Individual(genome)


def tournament_select(pop: Sequence[Individual], t: int, rng) -> Individual:
    """Best of t uniform draws with replacement (ties: lowest index)."""
    if not pop:
        raise ValueError("empty population")
    if t < 1:
        raise ValueError("tournament size must be >= 1")
    picks = rng.integers(0, len(pop), size=t)
    best = min(picks, key=lambda i: (pop[int(i)].fitness, int(i)))
    return pop[int(best)]


def breed(pop: Sequence[Individual], cfg: GpConfig, rng) -> list[Individual]:
    """Refill the population from the surviving half via the crossover and
    mutation pipelines."""
    children: list[Individual] = []
    while len(children) < cfg.population:
        if rng.random() < cfg.p_crossover:
            a = tournament_select(pop, cfg.tournament, rng)
            b = tournament_select(pop, cfg.tournament, rng)
            c1, c2 = crossover(a, b, cfg, rng)
            children.append(c1)
            if len(children) < cfg.population:
                children.append(c2)
        else:
            children.append(mutate(tournament_select(pop, cfg.tournament, rng),
                                    cfg, rng))
    return children


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

SimulateFn = Callable[[InstanceSpec, object, object], float]


def evaluate_stage(pop: list[Individual], instances: Sequence[InstanceSpec],
                   bench: BenchmarkTable, stage: int, simulate: SimulateFn,
                   cfg: GpConfig, generation: int, *,
                   memo: dict | None = None,
                   mapper: Callable | None = None) -> list[Individual]:
    """Run one evaluation stage and return the evaluated population.

    Stage 1 screens every individual with cfg.n1 replications per instance
    and keeps the best half; stage 2 re-evaluates the survivors with cfg.n2
    replications, replacing the stage-1 averages. Replication seeds are
    shared across individuals (common random numbers) and cached in `memo`
    by (rule text, instance, replication), so duplicate genomes are free.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if len(instances) == 0:
        raise ValueError("empty training set")
    mapper = mapper or map
    memo = {} if memo is None else memo
    n_e = cfg.n1 if stage == 1 else cfg.n2
    if bench.n_reps < n_e:
        raise ValueError(
            f"benchmark table has {bench.n_reps} replications, stage needs {n_e}")

    texts = [format_rule(ind.genome) for ind in pop]
    programs: dict[str, object] = {}
    pending: list[tuple] = []
    seen = set()
    for ind, text in zip(pop, texts):
        if text not in programs:
            programs[text] = compile_genome(ind.genome)
        for i, spec in enumerate(instances):
            for k in range(n_e):
                key = (text, i, k)
                if key not in memo and key not in seen:
                    seen.add(key)
                    pending.append((key, spec, programs[text]))

    def run(task):
        (text, i, k), spec, program = task
        return simulate(spec, program,
                        replication_seed(bench.seed, i, k))

    for task, tbar in zip(pending, mapper(run, pending)):
        memo[task[0]] = float(tbar)

    bench_best = bench.best_means(n_e)
    for ind, text in zip(pop, texts):
        means = [np.mean([memo[(text, i, k)] for k in range(n_e)])
                 for i in range(len(instances))]
        ind.tau = relative_performance(means, bench_best, cfg.epsilon)
        ind.fitness = fitness(ind.tau, ind.size, generation, cfg.bloat_rho)
        ind.eval_stage = stage

    if stage == 1:
        order = sorted(range(len(pop)), key=lambda i: (pop[i].fitness, i))
        keep = max(1, len(pop) // 2)
        return [pop[i] for i in order[:keep]]
    return pop


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best_tau: float
    best_fitness: float
    mean_size: float
    elapsed: float


@dataclass
class EvolveResult:
    best: Individual
    generations: list[GenerationStats]
    config: GpConfig


def evolve(cfg: GpConfig, training_instances: Sequence[InstanceSpec],
           bench: BenchmarkTable, simulate: SimulateFn, *,
           mapper: Callable | None = None,
           on_generation: Callable[[GenerationStats], None] | None = None,
           ) -> EvolveResult:
    """Full generational run; returns the elite individual and the log.

    The elite is tracked across generations by recomputing its size penalty
    at the current generation before comparing, so comparisons stay on one
    scale. Re-running with the same config reproduces the identical elite.
    """
    if len(training_instances) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)))
    pop = init_population(cfg, rng)
    memo: dict = {}
    elite: Individual | None = None
    rows: list[GenerationStats] = []
    for g in range(1, cfg.generations + 1):
        t0 = time.perf_counter()
        pop = evaluate_stage(pop, training_instances, bench, 1, simulate,
                             cfg, g, memo=memo, mapper=mapper)
        pop = evaluate_stage(pop, training_instances, bench, 2, simulate,
                             cfg, g, memo=memo, mapper=mapper)
        best = min(pop, key=lambda ind: (ind.fitness, ind.size))
        if elite is None or best.fitness < fitness(
                elite.tau, elite.size, g, cfg.bloat_rho):
            elite = Individual(best.genome, tau=best.tau,
                               fitness=best.fitness, eval_stage=2)
        row = GenerationStats(
            generation=g,
            best_tau=best.tau,
            best_fitness=best.fitness,
            mean_size=float(np.mean([ind.size for ind in pop])),
            elapsed=time.perf_counter() - t0,
        )
        rows.append(row)
        if on_generation is not None:
            on_generation(row)
        if g < cfg.generations:
            pop = breed(pop, cfg, rng)
    elite.fitness = fitness(elite.tau, elite.size, cfg.generations,
                            cfg.bloat_rho)
    return EvolveResult(best=elite, generations=rows, config=cfg)
