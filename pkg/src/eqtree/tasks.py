"""Generalization, depth extrapolation, and equation completion experiments."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Dataset, split_dataset
from .evalcore import DomainFailure, OracleConfig, eval_expr, label_equation
from .grammar import (DEFAULT_TABLE, DEFAULT_VARIABLES, FUNCEVAL, SYMBOLIC, Equation, Expr,
                      FunctionTable, enumerate_exprs, number_grid, substitute, symbolic_terminals)
from .models import (TREE_ARCHS, ModelParams, checkpoint_bytes, verify_funceval_model,
                     verify_symbolic)
from .training import (Metrics, TrainConfig, TrainResult, evaluate_model, evaluate_predictions,
                       train_model, write_metrics_csv)

log = logging.getLogger(__name__)

K_MAX = 25
BLANK = "?"


# ---------------------------------------------------------------- completion instances

@lru_cache(maxsize=8)
def symbolic_candidates(variables: tuple[str, ...] = DEFAULT_VARIABLES,
                        table: FunctionTable = DEFAULT_TABLE) -> tuple[Expr, ...]:
    return tuple(enumerate_exprs(2, symbolic_terminals(variables), table))


@lru_cache(maxsize=1)
def funceval_candidates() -> tuple[Expr, ...]:
    grid = number_grid()
    have = {str(e) for e in grid}
    extra = [Expr.const(c) for c in ("4", "10", "pi") if c not in have]
    return tuple(grid + extra)


@dataclass(frozen=True)
class CompletionInstance:
    equation: Equation
    side: int
    path: tuple[int, ...]
    truth: Expr
    kind: str
    candidates: tuple[Expr, ...] = field(repr=False)

    def fill(self, e: Expr) -> Equation:
        new_side = substitute(self.equation.side(self.side), self.path, e)
        return replace(self.equation.with_side(self.side, new_side), label=None, provenance="")

    @property
    def template(self) -> str:
        """Equation text with the blank shown as ``?``."""
        side = str(substitute(self.equation.side(self.side), self.path, Expr.var(BLANK)))
        other = str(self.equation.side(1 - self.side))
        return f"{side} = {other}" if self.side == 0 else f"{other} = {side}"

    @property
    def truth_value(self) -> float:
        return eval_expr(self.truth)


def eligible_blanks(eq: Equation) -> list[tuple[int, tuple[int, ...]]]:
    out = []
    for side in (0, 1):
        for path, node in eq.side(side).walk():
            if node.depth() > 2:
                continue
            if eq.kind == FUNCEVAL:
                try:
                    eval_expr(node)
                except DomainFailure:
                    continue
            out.append((side, path))
    return out


def make_completion_instances(test: Sequence[Equation], rng: np.random.Generator,
                              variables: Sequence[str] = DEFAULT_VARIABLES,
                              table: FunctionTable = DEFAULT_TABLE) -> tuple[list[CompletionInstance], int]:
    """One blank per correct test equation; returns (instances, skipped count)."""
    out, skipped = [], 0
    for eq in test:
        if eq.label is not True:
            continue
        sites = eligible_blanks(eq)
        if not sites:
            skipped += 1
            continue
        side, path = sites[int(rng.integers(len(sites)))]
        cands = symbolic_candidates(tuple(variables), table) if eq.kind == SYMBOLIC \
            else funceval_candidates()
        out.append(CompletionInstance(eq, side, path, eq.side(side).at(path), eq.kind, cands))
    return out, skipped


# ---------------------------------------------------------------- ranking

@dataclass(frozen=True)
class RankedPredictions:
    candidates: tuple[Expr, ...]
    confidence: np.ndarray

    def top(self, k: int) -> tuple[Expr, ...]:
        return self.candidates[:k]


def rank_candidates(inst: CompletionInstance, params: ModelParams) -> RankedPredictions:
    """Score every candidate fill; ties break on the printed candidate text."""
    filled = [inst.fill(c) for c in inst.candidates]
    if inst.kind == SYMBOLIC or not params.is_tree:
        conf = verify_symbolic(filled, params, chunk=len(filled))
    else:
        _, _, sq = verify_funceval_model(filled, params, chunk=len(filled))
        conf = -sq
    texts = [str(c) for c in inst.candidates]
    order = sorted(range(len(filled)), key=lambda i: (-conf[i], texts[i]))
    return RankedPredictions(tuple(inst.candidates[i] for i in order), conf[order])


def first_correct_rank(inst: CompletionInstance, ranking: RankedPredictions, k_max: int = K_MAX,
                       oracle: OracleConfig = OracleConfig()) -> int | None:
    """1-based rank of the first oracle-correct fill within the top ``k_max``."""
    for r, cand in enumerate(ranking.top(k_max), start=1):
        if cand == inst.truth or label_equation(inst.fill(cand), oracle) is True:
            return r
    return None


def top_k_accuracy(instances: Sequence[CompletionInstance], rankings: Sequence[RankedPredictions],
                   k: int, oracle: OracleConfig = OracleConfig()) -> float:
    if not instances:
        return float("nan")
    hits = [first_correct_rank(i, r, k, oracle) is not None for i, r in zip(instances, rankings)]
    return float(np.mean(hits))


def top_k_accuracy_curve(first_ranks: Sequence[int | None], k_max: int = K_MAX) -> np.ndarray:
    ranks = np.array([np.inf if r is None else r for r in first_ranks])
    if ranks.size == 0:
        return np.full(k_max, np.nan)
    return np.array([(ranks <= k).mean() for k in range(1, k_max + 1)])


def _value(e: Expr) -> float:
    try:
        return eval_expr(e)
    except DomainFailure:
        return float("nan")


def top_k_min_sq(inst: CompletionInstance, ranking: RankedPredictions, k_max: int = K_MAX) -> np.ndarray:
    """Running minimum over k of (candidate value - blank value)^2."""
    truth = inst.truth_value
    vals = np.array([_value(c) for c in ranking.top(k_max)])
    sq = np.where(np.isfinite(vals), (vals - truth) ** 2, np.inf)
    return np.minimum.accumulate(sq)


def top_k_min_mse(instances: Sequence[CompletionInstance], rankings: Sequence[RankedPredictions],
                  k: int) -> float:
    if not instances:
        return float("nan")
    return float(np.mean([top_k_min_sq(i, r, k)[-1] for i, r in zip(instances, rankings)]))


def check_monotone(acc_curve: np.ndarray | None = None, mse_curve: np.ndarray | None = None) -> None:
    if acc_curve is not None and np.any(np.diff(acc_curve) < 0):
        raise AssertionError("top-k accuracy decreased with k")
    if mse_curve is not None and np.any(np.diff(mse_curve) > 0):
        raise AssertionError("top-k min MSE increased with k")


@dataclass
class CompletionResult:
    accuracy: np.ndarray
    min_mse: np.ndarray
    n_symbolic: int
    n_funceval: int
    skipped: int


def evaluate_completion(test: Sequence[Equation], params: ModelParams, seed: int = 0,
                        k_max: int = K_MAX, oracle: OracleConfig = OracleConfig(),
                        max_instances: int | None = None) -> CompletionResult:
    """Top-k accuracy (symbolic) and top-k min MSE (funceval, tree models)."""
    rng = np.random.default_rng([seed, 3])
    instances, skipped = make_completion_instances(test, rng, params.variables, params.table)
    sym = [i for i in instances if i.kind == SYMBOLIC]
    fe = [i for i in instances if i.kind == FUNCEVAL and params.is_tree]
    if max_instances is not None:
        sym, fe = sym[:max_instances], fe[:max_instances]
    ranks = [first_correct_rank(i, rank_candidates(i, params), k_max, oracle) for i in sym]
    acc = top_k_accuracy_curve(ranks, k_max)
    if fe:
        mse = np.mean([top_k_min_sq(i, rank_candidates(i, params), k_max) for i in fe], axis=0)
    else:
        mse = np.full(k_max, np.nan)
    check_monotone(acc if sym else None, mse if fe else None)
    return CompletionResult(acc, mse, len(sym), len(fe), skipped)


# ---------------------------------------------------------------- experiments

@dataclass(frozen=True)
class Variant:
    arch: str
    use_funceval: bool = False

    @property
    def name(self) -> str:
        return self.arch + ("+data" if self.use_funceval else "")

    @classmethod
    def parse(cls, text: str) -> "Variant":
        arch, _, data = text.strip().partition("+")
        if data not in ("", "data"):
            raise ValueError(f"bad variant {text!r}")
        return cls(arch, data == "data")


DEFAULT_VARIANTS = (Variant("rnn"), Variant("lstm"), Variant("treenn"), Variant("treelstm"),
                    Variant("treenn", True), Variant("treelstm", True))


@dataclass(frozen=True)
class ExperimentConfig:
    variants: tuple[Variant, ...] = DEFAULT_VARIANTS
    seeds: tuple[int, ...] = (0,)
    split_seed: int = 0
    extrapolate_depth: int = 4
    k_max: int = K_MAX
    completion_limit: int | None = None


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if isinstance(v, float) and np.isnan(v) else
                    f"{v:.6f}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _train_cfg(base: TrainConfig, v: Variant, seed: int) -> TrainConfig:
    return replace(base, seed=seed, use_funceval=v.use_funceval)


def _majority(train: Sequence[Equation], test: Sequence[Equation]) -> Metrics:
    sym_train = [e for e in train if e.kind == SYMBOLIC]
    majority = np.mean([bool(e.label) for e in sym_train]) > 0.5
    sym = [e for e in test if e.kind == SYMBOLIC]
    return evaluate_predictions(sym, [majority] * len(sym))


def run_experiment(name: str, dataset: Dataset, train_cfg: TrainConfig, cfg: ExperimentConfig,
                   out_dir: str | Path, trained: dict | None = None, jobs: int = 1) -> dict:
    """Train the requested variants and write report CSVs plus a manifest.

    ``name`` is ``generalization``, ``extrapolation`` or ``completion``.
    Returns the report texts keyed by file name. ``trained`` caches
    (variant, seed, split) -> TrainResult across calls. ``jobs`` > 1 trains
    independent variants in worker processes; results do not depend on it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trained = {} if trained is None else trained
    if name == "extrapolation":
        train, test = split_dataset(dataset, "holdout", depth=cfg.extrapolate_depth)
        split_key = f"holdout{cfg.extrapolate_depth}"
    elif name in ("generalization", "completion"):
        train, test = split_dataset(dataset, "random", seed=cfg.split_seed)
        split_key = f"random{cfg.split_seed}"
    else:
        raise ValueError(f"unknown experiment {name!r}")

    variants = cfg.variants
    if name == "completion":
        variants = tuple(v for v in variants if v.arch in TREE_ARCHS or not v.use_funceval)

    pending = {}
    for v in variants:
        for seed in cfg.seeds:
            key = (v, seed, split_key, train_cfg)
            if key not in trained:
                pending[key] = (train.equations, _train_cfg(train_cfg, v, seed), v.arch)
    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {k: pool.submit(train_model, *a) for k, a in pending.items()}
            for k, f in futures.items():
                trained[k] = f.result()
    else:
        for k, a in pending.items():
            log.info("training %s seed %d on %s", k[0].name, k[1], split_key)
            trained[k] = train_model(*a)
    results: dict[tuple, TrainResult] = {(v, seed): trained[(v, seed, split_key, train_cfg)]
                                         for v in variants for seed in cfg.seeds}

    reports: dict[str, str] = {}
    if name in ("generalization", "extrapolation"):
        rows = []
        maj = _majority(train.equations, test.equations)
        rows.append(["majority", "", maj.accuracy, float("nan"), maj.precision, maj.recall,
                     *[maj.depth_accuracy.get(d, float("nan")) for d in range(1, 5)]])
        for (v, seed), res in results.items():
            m = evaluate_model(test.equations, res.params, res.tau)
            # the decoder is untrained without funceval data
            feval = m.mse if v.use_funceval and v.arch in TREE_ARCHS else float("nan")
            rows.append([v.name, seed, m.accuracy, feval, m.precision, m.recall,
                         *[m.depth_accuracy.get(d, float("nan")) for d in range(1, 5)]])
        header = ["approach", "seed", "sym", "feval_mse", "precision", "recall",
                  "depth1", "depth2", "depth3", "depth4"]
        reports[f"{name}.csv"] = _csv(header, rows)
        log_rows = [r for (v, seed), res in results.items() for r in res.log]
        reports[f"{name}_metrics.csv"] = write_metrics_csv(log_rows)
    else:
        acc_rows, mse_rows = [], []
        for (v, seed), res in results.items():
            c = evaluate_completion(test.equations, res.params, seed=cfg.split_seed,
                                    k_max=cfg.k_max, max_instances=cfg.completion_limit)
            for k in range(1, cfg.k_max + 1):
                acc_rows.append([v.name, seed, k, c.accuracy[k - 1]])
                if v.use_funceval and v.arch in TREE_ARCHS:
                    mse_rows.append([v.name, seed, k, c.min_mse[k - 1]])
        reports["completion_topk_accuracy.csv"] = _csv(["approach", "seed", "k", "accuracy"], acc_rows)
        reports["completion_topk_min_mse.csv"] = _csv(["approach", "seed", "k", "min_mse"], mse_rows)

    manifest = {
        "experiment": name,
        "dataset_digest": dataset.digest(),
        "train_config": asdict(train_cfg),
        "experiment_config": {**asdict(cfg), "variants": [v.name for v in cfg.variants]},
        "checkpoints": {f"{v.name}/seed{seed}": hashlib.sha256(checkpoint_bytes(res.params)).hexdigest()
                        for (v, seed), res in results.items()},
        "reports": {k: hashlib.sha256(t.encode()).hexdigest() for k, t in sorted(reports.items())},
    }
    reports[f"{name}_manifest.json"] = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    for fname, text in reports.items():
        (out / fname).write_text(text)
    return reports

