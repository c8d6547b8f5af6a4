"""Finite-difference check of every model's training loss.

Each configuration draws an architecture, a head, a small hidden size, random
trees of depth <= 4 and perturbed parameters, then compares the tape gradient
of the training loss with central differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, numeric_gradient, relative_error
from .grammar import (CONSTANTS, DEFAULT_TABLE, DEFAULT_VARIABLES, FUNCEVAL, SYMBOLIC, Equation,
                      Expr, FunctionTable)
from .models import ARCHS, TREE_ARCHS, ModelParams
from .training import TrainConfig, batch_loss

HEADS = (SYMBOLIC, FUNCEVAL, "mixed")
TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    index: int
    arch: str
    head: str
    d: int
    head_bias: bool
    dropout: float
    n_checked: int
    max_rel_error: float
    cells: frozenset = field(default_factory=frozenset)


@dataclass
class GradcheckReport:
    results: list[CheckResult]
    tolerance: float = TOLERANCE

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def cells(self) -> frozenset:
        out = set()
        for r in self.results:
            out |= r.cells
        return frozenset(out)

    def summary(self) -> str:
        return (f"gradcheck: {len(self.results)} configs, max relative error "
                f"{self.max_rel_error:.3e} (tolerance {self.tolerance:.0e}): "
                f"{'PASS' if self.passed else 'FAIL'}")


def random_expr(rng: np.random.Generator, depth: int, leaves: list[Expr],
                table: FunctionTable = DEFAULT_TABLE) -> Expr:
    """Random tree of exactly ``depth`` levels over ``leaves``."""
    if depth <= 1:
        return leaves[rng.integers(len(leaves))]
    name = table.names[rng.integers(len(table.names))]
    arity = table.arity(name)
    deep = rng.integers(arity)
    args = [random_expr(rng, depth - 1 if i == deep else int(rng.integers(1, depth)), leaves, table)
            for i in range(arity)]
    return Expr.call(name, *args)


def _leaves(kind: str, rng) -> list[Expr]:
    consts = [Expr.const(c) for c in CONSTANTS]
    if kind == SYMBOLIC:
        return consts + [Expr.var(v) for v in DEFAULT_VARIABLES]
    nums = [Expr.num(round(float(v), 2)) for v in rng.uniform(-3.14, 3.14, 6)]
    return consts + nums


def random_equations(rng: np.random.Generator, head: str, n: int = 3,
                     max_depth: int = 4) -> list[Equation]:
    kinds = [head] * n if head != "mixed" else [SYMBOLIC, FUNCEVAL] * ((n + 1) // 2)
    out = []
    for i, kind in enumerate(kinds[:n]):
        leaves = _leaves(kind, rng)
        lhs = random_expr(rng, int(rng.integers(1, max_depth + 1)), leaves)
        rhs = random_expr(rng, int(rng.integers(1, max_depth + 1)), leaves)
        out.append(Equation(lhs, rhs, bool(i % 2 == 0), kind))
    return out


def _cells(eqs) -> set:
    out = set()

    def walk(e):
        if not e.is_leaf:
            out.add(e.head)
            for a in e.args:
                walk(a)
    for eq in eqs:
        walk(eq.lhs)
        walk(eq.rhs)
    return out


def check_config(index: int, seed: int = 0, max_dim: int = 8, n_probe: int = 60,
                 eps: float = 1e-5) -> CheckResult:
    """Gradient check of one random configuration."""
    rng = np.random.default_rng([seed, index])
    arch = ARCHS[index % len(ARCHS)]
    head = HEADS[(index // len(ARCHS)) % len(HEADS)]
    d = int(rng.integers(2, max_dim + 1))
    head_bias = bool(rng.integers(2))
    dropout = float(rng.choice([0.0, 0.3]))
    eqs = random_equations(rng, head)
    params = ModelParams(arch, d, seed=int(rng.integers(2**31)), head_bias=head_bias)
    params.theta[...] += rng.normal(0.0, 0.5, params.theta.size)
    cfg = TrainConfig(dropout=dropout, hidden_dim=d)
    targets = {e.text: tuple(rng.uniform(-3, 3, 2)) for e in eqs if e.kind == FUNCEVAL}
    mask_seed = int(rng.integers(2**31))

    def forward(grad: bool):
        tape = Tape(grad=grad)
        # fresh generator each pass so every pass draws the same dropout mask
        loss = batch_loss(params, tape, eqs, cfg, np.random.default_rng(mask_seed), targets)
        return tape, loss

    tape, loss = forward(True)
    params.store.zero_grad()
    tape.backward(loss)
    analytic = params.store.grad.copy()
    live = np.flatnonzero(analytic)
    dead = np.flatnonzero(analytic == 0)
    idx = np.concatenate([rng.permutation(live)[:n_probe], rng.permutation(dead)[:n_probe // 6]])
    numeric = numeric_gradient(lambda: float(forward(False)[1].value.sum()), params.theta, eps,
                               indices=idx.tolist())
    err = float(relative_error(analytic[idx], numeric).max()) if idx.size else 0.0
    cells = frozenset(_cells(eqs)) if arch in TREE_ARCHS else frozenset()
    return CheckResult(index, arch, head, d, head_bias, dropout, int(idx.size), err, cells)


def run_gradcheck(n_configs: int = 100, seed: int = 0, max_dim: int = 8) -> GradcheckReport:
    return GradcheckReport([check_config(i, seed, max_dim) for i in range(n_configs)])
