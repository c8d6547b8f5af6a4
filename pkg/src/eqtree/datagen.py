"""Dataset generation: mutated and rewritten identities, function evaluations,
decimal expansion trees, splits and the line-delimited dataset format."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evalcore import (DomainFailure, OracleConfig, eval_expr, label_equation,
                       round_to_precision, verify_funceval)
from .grammar import (CONSTANT, DEFAULT_TABLE, DEFAULT_VARIABLES, FUNCEVAL,
                      NUMBER, SYMBOLIC, VARIABLE, Equation, Expr, FunctionTable, ParseError,
                      decimal_tree, instantiate, match, substitute, symbolic_terminals)

log = logging.getLogger(__name__)

SHRINK_NODE, REPLACE_NODE, GROW_NODE, GROW_SIDES = range(4)
ACTION_NAMES = ("shrink", "replace", "grow", "growsides")

DEFAULT_DEPTH_PROFILE = (39, 2547, 12217, 2836)


class MutationExhausted(RuntimeError):
    pass


class AxiomError(ValueError):
    pass


def default_axiom_path() -> Path:
    return Path(str(resources.files("eqtree") / "data" / "axioms.txt"))


def load_axioms(path: str | Path | None = None, table: FunctionTable = DEFAULT_TABLE,
                oracle: OracleConfig | None = None) -> list[Equation]:
    """Read an axiom file (``lhs = rhs`` per line, ``#`` comments).

    With ``oracle`` given, every axiom must verify correct; errors report the
    offending line number.
    """
    path = default_axiom_path() if path is None else Path(path)
    axioms = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            eq = Equation.parse(line, label=True, kind=SYMBOLIC, table=table, provenance="axiom")
        except (ParseError, ValueError) as exc:
            raise AxiomError(f"{path}:{lineno}: {exc}") from None
        if oracle is not None and label_equation(eq, oracle) is not True:
            raise AxiomError(f"{path}:{lineno}: axiom does not verify: {line}")
        axioms.append(eq)
    if not axioms:
        raise AxiomError(f"{path}: no axioms")
    return axioms


@dataclass
class GenConfig:
    max_depth: int = 4
    symbolic_count: int = 12000
    depth_profile: tuple[int, ...] = DEFAULT_DEPTH_PROFILE
    correct_fraction: float = 0.5
    seed: int = 0
    mutation_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    stall_rounds: int = 50
    max_rounds: int = 2_000_000
    table_max_depth: int = 3
    table_max_size: int = 6000
    variables: tuple[str, ...] = DEFAULT_VARIABLES
    funceval_count: int = 2000
    decimal_fraction: float = 0.15
    negated_input_prob: float = 0.5
    number_low: float = -3.14
    number_high: float = 3.14
    variable_share: float = 0.6
    fresh_variable_prob: float = 0.5

    def __post_init__(self):
        if not 0 < self.correct_fraction < 1:
            raise ValueError("correct_fraction must lie in (0, 1)")
        if self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        if not 0 <= self.variable_share <= 1 or not 0 <= self.fresh_variable_prob <= 1:
            raise ValueError("variable_share and fresh_variable_prob must lie in [0, 1]")
        if len(self.mutation_weights) != 4 or min(self.mutation_weights) < 0:
            raise ValueError("mutation_weights needs four non-negative weights")

    def depth_targets(self) -> dict[int, int]:
        prof = list(self.depth_profile)[: self.max_depth]
        prof += [prof[-1]] * (self.max_depth - len(prof))
        total = sum(prof)
        return {d + 1: int(round(self.symbolic_count * w / total)) for d, w in enumerate(prof)}


@dataclass
class Dataset:
    equations: list[Equation] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.equations)

    def __iter__(self):
        return iter(self.equations)

    def stats(self) -> dict:
        by_depth = Counter()
        correct_by_depth = Counter()
        kinds = Counter()
        labels = Counter()
        splits = Counter()
        for eq in self.equations:
            key = (eq.kind, eq.depth)
            by_depth[key] += 1
            if eq.label:
                correct_by_depth[key] += 1
            kinds[eq.kind] += 1
            labels[eq.label] += 1
            splits[eq.split] += 1
        return {
            "total": len(self.equations),
            "correct": labels[True],
            "incorrect": labels[False],
            "kinds": dict(sorted(kinds.items())),
            "splits": dict(sorted(splits.items())),
            "by_depth": {f"{k}:{d}": n for (k, d), n in sorted(by_depth.items())},
            "correct_by_depth": {f"{k}:{d}": n for (k, d), n in sorted(correct_by_depth.items())},
        }

    def of_kind(self, kind: str) -> "Dataset":
        return Dataset([e for e in self.equations if e.kind == kind], dict(self.meta))

    def with_split(self, split: str) -> "Dataset":
        return Dataset([e for e in self.equations if e.split == split], dict(self.meta))

    def to_text(self) -> str:
        buf = io.StringIO()
        for eq in self.equations:
            buf.write(json.dumps(equation_record(eq), ensure_ascii=False))
            buf.write("\n")
        return buf.getvalue()

    def save(self, path: str | Path) -> str:
        text = self.to_text()
        Path(path).write_text(text, encoding="utf-8")
        return hashlib.sha256(text.encode()).hexdigest()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def load(cls, path: str | Path, table: FunctionTable = DEFAULT_TABLE) -> "Dataset":
        eqs = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                eqs.append(equation_from_record(json.loads(line), table))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        return cls(eqs)


RECORD_FIELDS = ("lhs", "rhs", "label", "kind", "depth", "split", "provenance")


def equation_record(eq: Equation) -> dict:
    label = None if eq.label is None else ("correct" if eq.label else "incorrect")
    return {"lhs": str(eq.lhs), "rhs": str(eq.rhs), "label": label, "kind": eq.kind,
            "depth": eq.depth, "split": eq.split, "provenance": eq.provenance}


def equation_from_record(rec: dict, table: FunctionTable = DEFAULT_TABLE) -> Equation:
    label = {"correct": True, "incorrect": False, None: None}[rec["label"]]
    eq = Equation.parse(f"{rec['lhs']} = {rec['rhs']}", label=label, kind=rec["kind"], table=table,
                        provenance=rec.get("provenance", ""), split=rec.get("split", ""))
    if "depth" in rec and rec["depth"] != eq.depth:
        raise ValueError(f"stored depth {rec['depth']} != recomputed {eq.depth}")
    return eq


# ---------------------------------------------------------------- mutation

def _nodes(eq: Equation) -> list[tuple[int, tuple[int, ...]] | None]:
    """All mutation sites: ``None`` for the equality root, else (side, path)."""
    out: list = [None]
    for s in (0, 1):
        out.extend((s, path) for path, _ in eq.side(s).walk())
    return out


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def mutate(eq: Equation, rng: np.random.Generator, terminals: Sequence[Expr] | None = None,
           table: FunctionTable = DEFAULT_TABLE, weights: Sequence[float] | None = None,
           max_tries: int = 50) -> Equation:
    """One random local change (shrink, replace, grow, grow-sides) at a random node.

    The result is unlabeled and differs from ``eq``; raises
    :class:`MutationExhausted` if no applicable change is found.
    """
    terminals = list(terminals) if terminals is not None else symbolic_terminals()
    constants = [t for t in terminals if t.kind != VARIABLE] or terminals
    w = np.asarray(weights if weights is not None else (1, 1, 1, 1), dtype=float)
    w = w / w.sum()
    nodes = _nodes(eq)
    for _ in range(max_tries):
        action = int(rng.choice(4, p=w))
        site = _pick(rng, nodes)
        out = _apply_mutation(eq, action, site, rng, terminals, constants, table)
        if out is not None and out.text != eq.text:
            return replace(out, label=None, provenance=f"mutation:{ACTION_NAMES[action]}")
    raise MutationExhausted(f"no valid mutation of {eq.text}")


def _apply_mutation(eq, action, site, rng, terminals, constants, table):
    if site is None:
        if action != GROW_SIDES:
            return None
        op = _pick(rng, table.binary)
        t = _pick(rng, constants)
        return Equation(Expr.call(op, eq.lhs, t), Expr.call(op, eq.rhs, t), None, eq.kind)
    if action == GROW_SIDES:
        return None
    side, path = site
    node = eq.side(side).at(path)
    if action == SHRINK_NODE:
        if node.is_leaf:
            return None
        new = _pick(rng, node.args)
    elif action == REPLACE_NODE:
        if node.is_leaf:
            options = [t for t in terminals if t != node]
            if not options:
                return None
            new = _pick(rng, options)
        else:
            pool = table.unary if len(node.args) == 1 else table.binary
            options = [f for f in pool if f != node.head]
            if not options:
                return None
            new = Expr(_pick(rng, options), node.args)
    else:  # GROW_NODE
        f = _pick(rng, table.names)
        if table.arity(f) == 1:
            new = Expr.call(f, node)
        else:
            other = _pick(rng, terminals)
            new = Expr.call(f, node, other) if rng.random() < 0.5 else Expr.call(f, other, node)
    return eq.with_side(side, substitute(eq.side(side), path, new))


# ---------------------------------------------------------------- rewriting

class RewriteTable:
    """Pattern dictionary ``key -> value`` of equal expressions.

    Variable leaves in keys and values are wildcards. Lookup is indexed by the
    key's head so a node is only tried against plausible keys.
    """

    def __init__(self, max_size: int | None = None):
        self.entries: list[tuple[Expr, Expr]] = []
        self.max_size = max_size
        self._seen: set[tuple[str, str]] = set()
        self._by_head: dict[tuple[str, str], list[int]] = defaultdict(list)
        self._wild: list[int] = []

    def __len__(self):
        return len(self.entries)

    def add(self, key: Expr, value: Expr) -> bool:
        if key == value or (self.max_size is not None and len(self.entries) >= self.max_size):
            return False
        sig = (str(key), str(value))
        if sig in self._seen:
            return False
        self._seen.add(sig)
        self.entries.append((key, value))
        idx = len(self.entries) - 1
        if key.kind == VARIABLE:
            self._wild.append(idx)
        else:
            self._by_head[(key.kind, key.head)].append(idx)
        return True

    def add_equation(self, eq: Equation) -> None:
        self.add(eq.lhs, eq.rhs)
        self.add(eq.rhs, eq.lhs)

    @classmethod
    def from_equations(cls, eqs: Iterable[Equation], max_size: int | None = None) -> "RewriteTable":
        t = cls(max_size)
        for eq in eqs:
            t.add_equation(eq)
        return t

    def matches(self, node: Expr) -> list[tuple[Expr, Expr, dict]]:
        out = []
        for idx in self._by_head.get((node.kind, node.head), []) + self._wild:
            key, value = self.entries[idx]
            b = match(key, node)
            if b is not None:
                out.append((key, value, b))
        return out


def rewrite_at(eq: Equation, side: int, path: Sequence[int], table: RewriteTable,
               rng: np.random.Generator, terminals: Sequence[Expr] | None = None,
               fresh_variable_prob: float = 0.0) -> Equation | None:
    """Replace the subtree at (side, path) using one matching table entry.

    Pattern variables that appear only in the value are bound to a random
    variable with probability ``fresh_variable_prob``, otherwise to a random
    terminal.
    """
    node = eq.side(side).at(path)
    found = table.matches(node)
    if not found:
        return None
    key, value, binding = _pick(rng, found)
    terminals = list(terminals) if terminals is not None else symbolic_terminals()
    variables = [t for t in terminals if t.kind == VARIABLE]
    binding = dict(binding)
    for v in value.variables():
        if v not in binding:
            use_var = variables and rng.random() < fresh_variable_prob
            binding[v] = _pick(rng, variables if use_var else terminals)
    new = instantiate(value, binding)
    out = eq.with_side(side, substitute(eq.side(side), path, new))
    if out.text == eq.text:
        return None
    return replace(out, label=True, provenance="rewrite")


def rewrite_once(eq: Equation, table: RewriteTable, rng: np.random.Generator,
                 terminals: Sequence[Expr] | None = None,
                 fresh_variable_prob: float = 0.0) -> Equation | None:
    """Rewrite a random node of a correct equation; None if nothing matches there.

    The result is claimed correct; generators still confirm it with the oracle
    because wildcard bindings can leave a key's domain of validity.
    """
    site = _pick(rng, _nodes(eq)[1:])
    return rewrite_at(eq, site[0], site[1], table, rng, terminals, fresh_variable_prob)


# ---------------------------------------------------------------- symbolic

def _balanced_counts(n_correct: int, n_incorrect: int, frac: float) -> tuple[int, int]:
    if n_correct + n_incorrect == 0:
        return 0, 0
    if n_correct < frac * (n_correct + n_incorrect):
        n_incorrect = min(n_incorrect, int(round(n_correct * (1 - frac) / frac)))
    else:
        n_correct = min(n_correct, int(round(n_incorrect * frac / (1 - frac))))
    return n_correct, n_incorrect


def generate_symbolic(axioms: Sequence[Equation], cfg: GenConfig,
                      oracle: OracleConfig = OracleConfig(),
                      table: FunctionTable = DEFAULT_TABLE) -> Dataset:
    """Grow a labeled, deduplicated, per-depth balanced set of symbolic identities.

    Each round makes one mutation (labeled by the oracle) and one rewrite of a
    correct equation (kept only if the oracle agrees). The depth cap starts at
    1 and rises after ``cfg.stall_rounds`` rounds without a new correct
    equation.
    """
    rng = np.random.default_rng(cfg.seed)
    terminals = symbolic_terminals(cfg.variables)
    targets = cfg.depth_targets()
    frac = cfg.correct_fraction
    want = {}
    for d, n in targets.items():
        n_c = int(round(n * frac))
        for label, m in ((True, n_c), (False, n - n_c)):
            n_var = int(round(m * cfg.variable_share)) if d > 1 else m
            want[d, label, True] = n_var
            want[d, label, False] = m - n_var

    rtable = RewriteTable.from_equations(axioms, cfg.table_max_size)
    known: list[Equation] = list(axioms)
    correct: list[Equation] = list(axioms)
    seen: set[str] = {a.text for a in axioms}
    found: dict[tuple, list[Equation]] = defaultdict(list)

    def slot(eq: Equation, label: bool) -> tuple:
        return eq.depth, label, bool(eq.lhs.variables() or eq.rhs.variables())

    def slot_full(key) -> bool:
        # depth-1 buckets are not stratified by variables
        if key[0] == 1:
            return len(found[1, key[1], True]) + len(found[1, key[1], False]) >= want[1, key[1], True]
        return len(found[key]) >= want[key]

    for a in axioms:
        if a.depth <= cfg.max_depth:
            found[slot(a, True)].append(a)

    def full(d: int) -> bool:
        return all(slot_full((d, lab, v)) for lab in (True, False) for v in (True, False))

    rejected_rewrites = 0

    def consider(cand: Equation | None, cap: int, claimed: bool) -> bool:
        """Label and pool ``cand``; True when it filled an open slot."""
        nonlocal rejected_rewrites
        if cand is None or cand.depth > cap or cand.text in seen or full(cand.depth):
            return False
        seen.add(cand.text)
        label = label_equation(cand, oracle)
        if label is None or (claimed and label is not True):
            rejected_rewrites += claimed
            return False
        cand = replace(cand, label=label)
        key = slot(cand, label)
        progress = not slot_full(key)
        known.append(cand)
        found[key].append(cand)
        if label:
            correct.append(cand)
            if cand.depth <= cfg.table_max_depth:
                rtable.add_equation(cand)
        return progress

    cap, stall, rounds = 1, 0, 0
    while rounds < cfg.max_rounds:
        if cap >= cfg.max_depth and all(full(d) for d in targets):
            break
        rounds += 1
        try:
            cand = mutate(_pick(rng, known), rng, terminals, table, cfg.mutation_weights)
        except MutationExhausted:
            cand = None
        added = consider(cand, cap, claimed=False)
        cand = rewrite_once(_pick(rng, correct), rtable, rng, terminals, cfg.fresh_variable_prob)
        added |= consider(cand, cap, claimed=True)
        stall = 0 if added else stall + 1
        if stall >= cfg.stall_rounds:
            if cap < cfg.max_depth:
                cap += 1
                stall = 0
                log.info("depth cap -> %d after %d rounds", cap, rounds)
            elif stall >= 20 * cfg.stall_rounds:
                break

    out = []
    shortfall = {}
    for d in sorted(targets):
        chosen, short = _select_depth(d, found, want, frac, cfg.variable_share if d > 1 else None, rng)
        if short:
            shortfall[d] = short
        chosen.sort(key=lambda e: e.text)
        out.extend(chosen)
    if shortfall:
        log.warning("symbolic targets unreachable within budget, short by %s", shortfall)
    return Dataset(out, {"rounds": rounds, "final_cap": cap, "shortfall": shortfall,
                         "rewrite_table_size": len(rtable), "rejected_rewrites": rejected_rewrites})


def _select_depth(d: int, found: dict, want: dict, frac: float, share: float | None, rng):
    """Balanced random subsample of one depth's pools.

    Labels follow ``frac``; within a label, ``share`` of the picks contain a
    variable when the pools allow it, the rest is filled from the other pool.
    Returns the picks and how many equations the pools lacked.
    """
    pools = {lab: (found[d, lab, True], found[d, lab, False]) for lab in (True, False)}
    wanted = {lab: want[d, lab, True] + want[d, lab, False] for lab in (True, False)}
    avail = {lab: min(len(v) + len(n), wanted[lab]) for lab, (v, n) in pools.items()}
    short = sum(wanted[lab] - avail[lab] for lab in (True, False))
    n_c, n_i = _balanced_counts(avail[True], avail[False], frac)
    chosen = []
    for lab, n in ((True, n_c), (False, n_i)):
        var_pool, plain_pool = pools[lab]
        if share is None:
            merged = var_pool + plain_pool
            idx = sorted(rng.choice(len(merged), n, replace=False)) if n else []
            chosen.extend(merged[i] for i in idx)
            continue
        k_var = min(len(var_pool), int(round(n * share)))
        k_plain = min(len(plain_pool), n - k_var)
        k_var = min(len(var_pool), n - k_plain)
        for pool, k in ((var_pool, k_var), (plain_pool, k_plain)):
            idx = sorted(rng.choice(len(pool), k, replace=False)) if k else []
            chosen.extend(pool[i] for i in idx)
    return chosen, short


# ---------------------------------------------------------------- function evaluation

def _number_leaf(v: float, rng, negate_prob: float) -> Expr:
    if v < 0 and rng.random() < negate_prob:
        inner = Expr.num(-v)
        return Expr.call("*", Expr.const("-1"), inner)
    return Expr.num(v)


def _draw_number(rng, cfg: GenConfig) -> float:
    lo, hi = int(round(cfg.number_low * 100)), int(round(cfg.number_high * 100))
    return int(rng.integers(lo, hi + 1)) / 100


def _funceval_lhs(rng, cfg: GenConfig, table: FunctionTable) -> tuple[Expr, float]:
    while True:
        f = _pick(rng, table.names)
        args = [_number_leaf(_draw_number(rng, cfg), rng, cfg.negated_input_prob)
                for _ in range(table.arity(f))]
        lhs = Expr.call(f, *args)
        try:
            v = eval_expr(lhs)
        except DomainFailure:
            continue
        if abs(round_to_precision(v, 2)) <= cfg.number_high:
            return lhs, v


def _perturbed(eq_lhs: Expr, r: float, rng, cfg: GenConfig, table) -> Equation | None:
    if rng.random() < 0.5:
        delta = rng.uniform(0.05, 1.5) * (1 if rng.random() < 0.5 else -1)
        r2 = round_to_precision(r + delta, 2)
        if r2 == r or abs(r2) > cfg.number_high:
            return None
        return Equation(eq_lhs, Expr.num(r2), False, FUNCEVAL)
    # replace one input number of the lhs
    sites = [p for p, n in eq_lhs.walk() if n.kind == NUMBER or
             (n.kind == CONSTANT and p and n.head != "-1")]
    if not sites:
        return None
    path = _pick(rng, sites)
    parent = eq_lhs.at(path[:-1])
    n = _draw_number(rng, cfg)
    if parent.head == "*" and parent.args[0] == Expr.const("-1"):
        n = abs(n)
    new_lhs = substitute(eq_lhs, path, Expr.num(n))
    return Equation(new_lhs, Expr.num(r), False, FUNCEVAL)


def generate_funceval(cfg: GenConfig, rng: np.random.Generator | None = None,
                      table: FunctionTable = DEFAULT_TABLE) -> Dataset:
    """Function evaluations ``f(n) = r`` / ``f(n, m) = r`` and decimal trees ``n = tree(n)``."""
    rng = np.random.default_rng(cfg.seed + 1) if rng is None else rng
    n_total = cfg.funceval_count
    n_dec = min(int(round(n_total * cfg.decimal_fraction)), 629)
    n_correct = max(int(round(n_total * cfg.correct_fraction)) - n_dec, 0)
    n_incorrect = n_total - n_dec - n_correct
    seen: set[str] = set()
    out: list[Equation] = []

    def keep(eq: Equation | None) -> bool:
        if eq is None or eq.text in seen:
            return False
        if verify_funceval(eq) != eq.label:
            return False
        seen.add(eq.text)
        out.append(eq)
        return True

    made = 0
    while made < n_dec:
        n = _draw_number(rng, cfg)
        made += keep(Equation(Expr.num(n), decimal_tree(n), True, FUNCEVAL, provenance="decimal"))
    made = 0
    while made < n_correct:
        lhs, v = _funceval_lhs(rng, cfg, table)
        made += keep(Equation(lhs, Expr.num(round_to_precision(v, 2)), True, FUNCEVAL,
                              provenance="funceval"))
    made = 0
    while made < n_incorrect:
        lhs, v = _funceval_lhs(rng, cfg, table)
        eq = _perturbed(lhs, round_to_precision(v, 2), rng, cfg, table)
        if eq is not None:
            made += keep(replace(eq, provenance="funceval"))
    return Dataset(out)


def generate_dataset(axioms: Sequence[Equation], cfg: GenConfig,
                     oracle: OracleConfig = OracleConfig(),
                     table: FunctionTable = DEFAULT_TABLE) -> Dataset:
    sym = generate_symbolic(axioms, cfg, oracle, table)
    fe = generate_funceval(cfg, table=table) if cfg.funceval_count else Dataset()
    return Dataset(sym.equations + fe.equations, {"symbolic": sym.meta})


# ---------------------------------------------------------------- splits

def split_dataset(d: Dataset, mode: str = "random", seed: int = 0, depth: int | None = None,
                  test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """``mode='random'``: seeded 80/20 partition. ``mode='holdout'``: every
    symbolic equation of ``depth`` goes to test, everything else to train."""
    eqs = d.equations
    if mode == "random":
        order = np.random.default_rng(seed).permutation(len(eqs))
        n_test = int(round(len(eqs) * test_fraction))
        test_idx = set(order[:n_test].tolist())
        is_test = [i in test_idx for i in range(len(eqs))]
    elif mode == "holdout":
        if depth is None:
            raise ValueError("holdout split needs a depth")
        is_test = [e.kind == SYMBOLIC and e.depth == depth for e in eqs]
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    train = [replace(e, split="train") for e, t in zip(eqs, is_test) if not t]
    test = [replace(e, split="test") for e, t in zip(eqs, is_test) if t]
    if not train or not test:
        raise ValueError("split leaves one side empty")
    return Dataset(train, dict(d.meta)), Dataset(test, dict(d.meta))
