"""Numeric evaluation of expressions and the sampling identity oracle."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .grammar import CONSTANT, FUNCEVAL, FUNCTION, NUMBER, VARIABLE, Equation, Expr

CORRECT = "correct"
INCORRECT = "incorrect"
UNDECIDED = "undecided"


class DomainFailure(ArithmeticError):
    """A subterm left its real domain or the value is not finite."""


def _recip(f):
    def g(x):
        return 1.0 / f(x)
    return g


def _of_recip(f):
    def g(x):
        return f(1.0 / x)
    return g


def _power(a, b):
    # 0^0 = 1; negative base with non-integer exponent is nan (domain failure)
    return np.power(a, b)


UNARY_IMPL = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan,
    "csc": _recip(np.sin), "sec": _recip(np.cos), "cot": _recip(np.tan),
    "asin": np.arcsin, "acos": np.arccos, "atan": np.arctan,
    "acsc": _of_recip(np.arcsin), "asec": _of_recip(np.arccos), "acot": _of_recip(np.arctan),
    "sinh": np.sinh, "cosh": np.cosh, "tanh": np.tanh,
    "csch": _recip(np.sinh), "sech": _recip(np.cosh), "coth": _recip(np.tanh),
    "asinh": np.arcsinh, "acosh": np.arccosh, "atanh": np.arctanh,
    "acsch": _of_recip(np.arcsinh), "asech": _of_recip(np.arccosh), "acoth": _of_recip(np.arctanh),
    "exp": np.exp, "log": np.log,
}
BINARY_IMPL = {
    "+": np.add, "*": np.multiply, "^": _power, "atan2": np.arctan2,
}


def eval_array(e: Expr, env: dict[str, np.ndarray | float], n: int | None = None) -> np.ndarray | float:
    """Evaluate ``e`` elementwise over arrays bound in ``env``.

    Domain failures show up as nan/inf entries; callers mask them out.
    Raises KeyError for an unbound variable.
    """
    if e.kind == FUNCTION:
        if len(e.args) == 1:
            return UNARY_IMPL[e.head](eval_array(e.args[0], env, n))
        return BINARY_IMPL[e.head](eval_array(e.args[0], env, n), eval_array(e.args[1], env, n))
    if e.kind == VARIABLE:
        if e.head not in env:
            raise KeyError(f"unbound variable {e.head!r}")
        return env[e.head]
    return np.float64(e.value)


def eval_expr(e: Expr, env: dict[str, float] | None = None) -> float:
    """IEEE double value of ``e``; raises :class:`DomainFailure` off-domain."""
    with np.errstate(all="ignore"):
        v = float(eval_array(e, env or {}))
    if not np.isfinite(v):
        raise DomainFailure(str(e))
    return v


def round_to_precision(v: float, p: int = 2) -> float:
    """Half-away-from-zero rounding on the shortest decimal repr of ``v``."""
    if p not in (0, 1, 2):
        raise ValueError("precision must be 0, 1 or 2")
    q = Decimal(repr(float(v))).quantize(Decimal(1).scaleb(-p), rounding=ROUND_HALF_UP)
    out = float(q)
    return 0.0 if out == 0 else out


@dataclass(frozen=True)
class OracleConfig:
    samples: int = 64
    low: float = -3.14
    high: float = 3.14
    probes: tuple[float, ...] = (-1.0, -0.5, 0.0, 0.5, 1.0)
    abs_tol: float = 1e-8
    rel_tol: float = 1e-6
    min_valid_samples: int = 8
    seed: int = 0


@dataclass(frozen=True)
class OracleVerdict:
    verdict: str
    samples_tried: int
    samples_valid: int

    @property
    def is_correct(self) -> bool:
        return self.verdict == CORRECT


def _stream_for(text: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{text}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def sample_env(variables, cfg: OracleConfig, rng: np.random.Generator) -> tuple[dict, int]:
    n = cfg.samples + len(cfg.probes)
    env = {}
    for v in variables:
        draws = rng.uniform(cfg.low, cfg.high, cfg.samples)
        env[v] = np.concatenate([np.asarray(cfg.probes, dtype=float), draws])
    return env, n


def compare_sides(lhs_vals, rhs_vals, n: int, cfg: OracleConfig) -> OracleVerdict:
    lhs_vals = np.broadcast_to(np.asarray(lhs_vals, dtype=float), (n,))
    rhs_vals = np.broadcast_to(np.asarray(rhs_vals, dtype=float), (n,))
    valid = np.isfinite(lhs_vals) & np.isfinite(rhs_vals)
    n_valid = int(valid.sum())
    if n_valid < cfg.min_valid_samples:
        return OracleVerdict(UNDECIDED, n, n_valid)
    a, b = lhs_vals[valid], rhs_vals[valid]
    tol = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(a), np.abs(b))
    ok = bool(np.all(np.abs(a - b) <= tol))
    return OracleVerdict(CORRECT if ok else INCORRECT, n, n_valid)


def verify_identity(eq: Equation, cfg: OracleConfig = OracleConfig(),
                    rng: np.random.Generator | None = None) -> OracleVerdict:
    """Decide ``lhs = rhs`` by sampling the free variables.

    Without an explicit ``rng`` the random stream is derived from the
    equation text and ``cfg.seed``, so each equation gets the same verdict
    regardless of call order.
    """
    if rng is None:
        rng = _stream_for(eq.text, cfg.seed)
    variables = list(dict.fromkeys(eq.lhs.variables() + eq.rhs.variables()))
    if eq.kind == FUNCEVAL or not variables:
        env, n = {}, cfg.samples + len(cfg.probes)
    else:
        env, n = sample_env(variables, cfg, rng)
    with np.errstate(all="ignore"):
        lv = eval_array(eq.lhs, env)
        rv = eval_array(eq.rhs, env)
    return compare_sides(lv, rv, n, cfg)


def verify_funceval(eq: Equation) -> bool:
    """True iff both sides agree after rounding to precision 2."""
    try:
        lv = eval_expr(eq.lhs)
        rv = eval_expr(eq.rhs)
    except DomainFailure:
        return False
    return round_to_precision(lv, 2) == round_to_precision(rv, 2)


def label_equation(eq: Equation, cfg: OracleConfig = OracleConfig()) -> bool | None:
    """Ground-truth label: True/False, or None when undecided."""
    if eq.kind == FUNCEVAL:
        return verify_funceval(eq)
    v = verify_identity(eq, cfg).verdict
    return None if v == UNDECIDED else v == CORRECT


def leaf_value(e: Expr) -> float:
    if e.kind in (CONSTANT, NUMBER):
        return e.value
    raise TypeError(f"{e} is not a numeric leaf")
