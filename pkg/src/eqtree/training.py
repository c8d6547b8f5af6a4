"""Optimization loop, metrics, and threshold calibration."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .autodiff import Tape
from .evalcore import DomainFailure, eval_expr
from .grammar import (DEFAULT_TABLE, DEFAULT_VARIABLES, FUNCEVAL, SYMBOLIC, Equation,
                      FunctionTable, number_grid)
from .models import (ModelParams, autoencode, checkpoint_bytes, load_params, verify_funceval_model,
                     verify_symbolic)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "split", "arch", "accuracy", "precision", "recall", "mse",
                  "depth1", "depth2", "depth3", "depth4")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 1e-5
    dropout: float = 0.2
    hidden_dim: int = 50
    seed: int = 0
    batch_size: int = 32
    use_funceval: bool = False
    margin: float = 0.05
    pretrain_steps: int = 2000
    pretrain_lr: float = 2e-2
    patience: int = 0
    val_fraction: float = 0.1
    head_bias: bool = True
    anchor_lhs: bool = True
    ae_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0 or self.l2 < 0:
            raise ValueError("lr and l2 must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid Adam constants")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.hidden_dim < 1 or self.batch_size < 1:
            raise ValueError("hidden_dim and batch_size must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.patience < 0 or self.pretrain_steps < 0 or self.margin < 0 or self.ae_weight < 0:
            raise ValueError("patience, pretrain_steps, margin and ae_weight must be >= 0")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class Adam:
    """Adam over one flat parameter vector, with L2 added to the gradient."""

    def __init__(self, n: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, l2=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.l2 = lr, beta1, beta2, eps, l2
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        g = grad + self.l2 * theta if self.l2 else grad
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------- metrics

@dataclass
class Metrics:
    accuracy: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    mse: float = float("nan")
    mse_all: float = float("nan")
    funceval_accuracy: float = float("nan")
    n_symbolic: int = 0
    n_funceval: int = 0
    depth_accuracy: dict = field(default_factory=dict)

    def row(self, epoch, split: str, arch: str) -> dict:
        out = {"epoch": epoch, "split": split, "arch": arch, "accuracy": self.accuracy,
               "precision": self.precision, "recall": self.recall, "mse": self.mse}
        for d in range(1, 5):
            out[f"depth{d}"] = self.depth_accuracy.get(d, float("nan"))
        return out


def confusion_metrics(labels: Sequence[bool], predicted: Sequence[bool]) -> Metrics:
    """Accuracy, precision and recall with Correct as the positive class."""
    y = np.asarray(labels, dtype=bool)
    p = np.asarray(predicted, dtype=bool)
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    tn = int(np.sum(~p & ~y))
    fn = int(np.sum(~p & y))
    n = tp + fp + tn + fn
    return Metrics(accuracy=(tp + tn) / n if n else float("nan"),
                   precision=tp / (tp + fp) if tp + fp else 0.0,
                   recall=tp / (tp + fn) if tp + fn else 0.0,
                   tp=tp, fp=fp, tn=tn, fn=fn, n_symbolic=n)


def evaluate_predictions(eqs: Sequence[Equation], predicted: Sequence[bool]) -> Metrics:
    m = confusion_metrics([e.label for e in eqs], predicted)
    depths = np.array([e.depth for e in eqs])
    hit = np.asarray(predicted, dtype=bool) == np.array([bool(e.label) for e in eqs])
    for d in range(1, 5):
        sel = depths == d
        if sel.any():
            m.depth_accuracy[d] = float(hit[sel].mean())
    return m


def evaluate_model(test: Sequence[Equation], params: ModelParams, tau: float | None = None) -> Metrics:
    """Symbolic accuracy at threshold 0.5, funceval MSE, per-depth accuracy.

    ``mse`` averages the decoded-side squared error over correct funceval
    equations; ``mse_all`` includes the incorrect ones. With ``tau`` the
    funceval validity accuracy is reported too.
    """
    test = list(test)
    sym = [e for e in test if e.kind == SYMBOLIC or not params.is_tree]
    fe = [e for e in test if e.kind == FUNCEVAL and params.is_tree]
    m = Metrics()
    if sym:
        prob = verify_symbolic(sym, params)
        m = evaluate_predictions(sym, prob >= 0.5)
    if fe:
        _, _, sq = verify_funceval_model(fe, params)
        lab = np.array([bool(e.label) for e in fe])
        m.n_funceval = len(fe)
        m.mse_all = float(sq.mean())
        m.mse = float(sq[lab].mean()) if lab.any() else float("nan")
        if tau is not None:
            m.funceval_accuracy = float(np.mean((sq <= tau) == lab))
    return m


def calibrate_threshold(sq_err: Sequence[float], labels: Sequence[bool]) -> float:
    """Threshold on squared error maximizing balanced accuracy (ties: smallest)."""
    s = np.asarray(sq_err, dtype=float)
    if s.size and s.min() < 0:
        raise ValueError("squared errors must be non-negative")
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        raise ValueError("threshold calibration needs both correct and incorrect examples")
    u = np.unique(s)
    cands = np.concatenate([[u[0] / 2], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    pos, neg = s[y], s[~y]
    tpr = np.searchsorted(np.sort(pos), cands, side="right") / pos.size
    tnr = 1 - np.searchsorted(np.sort(neg), cands, side="right") / neg.size
    return float(cands[int(np.argmax((tpr + tnr) / 2))])


def calibrate_funceval_threshold(validation: Sequence[Equation], params: ModelParams) -> float:
    fe = [e for e in validation if e.kind == FUNCEVAL]
    _, _, sq = verify_funceval_model(fe, params)
    return calibrate_threshold(sq, [bool(e.label) for e in fe])


def write_metrics_csv(rows: Sequence[dict], path: str | Path | None = None) -> str:
    """Render rows with the fixed metric header; write to ``path`` if given."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in METRIC_COLUMNS})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.6f}"
    return "" if v is None else v


# ---------------------------------------------------------------- autoencoder

def pretrain_autoencoder(params: ModelParams, steps: int = 2000, lr: float = 2e-2,
                         values: np.ndarray | None = None, polish: int = 300) -> float:
    """Fit the number encoder/decoder to reproduce the precision-2 grid.

    Adam with a cosine learning-rate decay for ``steps`` full-batch steps,
    then ``polish`` L-BFGS iterations on the same loss. Only encoder and
    decoder weights change. Returns the final max abs error.
    """
    if values is None:
        values = np.array([e.value for e in number_grid()])
    names = [n for n in params.store.params if n.split(".")[0] in ("enc1", "enc2", "dec1", "dec2")]
    views = [params.store[n] for n in names]
    flat = np.concatenate([p.value.ravel() for p in views])

    def assign(x):
        off = 0
        for p in views:
            p.value[...] = x[off:off + p.value.size].reshape(p.value.shape)
            off += p.value.size

    def loss_grad(x):
        assign(x)
        tape = Tape()
        out = params.decode(tape, params.encode_numbers(tape, values))
        loss = tape.mse(out, values)
        params.store.zero_grad()
        tape.backward(loss)
        # rescaled so L-BFGS does not stop on the tiny absolute loss
        g = np.concatenate([p.grad.ravel() for p in views])
        return _AE_SCALE * float(np.sum(loss.value)), _AE_SCALE * g

    opt = Adam(flat.size, lr=lr)
    floor = min(1e-5, lr)
    for s in range(steps):
        opt.lr = floor + 0.5 * (lr - floor) * (1.0 + np.cos(np.pi * s / steps))
        _, g = loss_grad(flat)
        opt.step(flat, g / _AE_SCALE)
    if polish > 0:
        res = minimize(loss_grad, flat.copy(), jac=True, method="L-BFGS-B",
                       options={"maxiter": polish, "ftol": 0.0, "gtol": 0.0})
        if np.all(np.isfinite(res.x)) and res.fun <= loss_grad(flat)[0]:
            flat = res.x
    assign(flat)
    params.store.zero_grad()
    return float(np.max(np.abs(autoencode(values, params) - values)))


_AE_SCALE = 1e4


# ---------------------------------------------------------------- training

def _side_value(e) -> float:
    try:
        return eval_expr(e)
    except DomainFailure:
        return float("nan")


def _target(eq: Equation) -> tuple[float, float]:
    """Exact values of both sides."""
    return _side_value(eq.lhs), _side_value(eq.rhs)


_GRID = None


def _grid_values() -> np.ndarray:
    global _GRID
    if _GRID is None:
        _GRID = np.array([e.value for e in number_grid()])
    return _GRID


def batch_loss(params: ModelParams, tape: Tape, batch: Sequence[Equation], cfg: TrainConfig,
               rng=None, targets: dict | None = None):
    """Summed loss of a batch divided by its size.

    Symbolic equations use BCE on the verification head. Funceval equations
    (tree models) use side MSE plus anchors of the decoded sides to their
    exact values when correct, and a hinge pushing the side error above
    ``cfg.margin`` when incorrect. With ``rng`` given, each funceval equation
    also draws one grid number whose autoencoder round trip is penalized.
    Chain models classify funceval equations like symbolic ones.
    """
    dropout = cfg.dropout if rng is not None else 0.0
    if not params.is_tree:
        z = params.symbolic_logits(tape, batch, rng, dropout)
        y = np.array([[float(e.label)] for e in batch])
        return tape.scale(tape.sum(tape.bce_logits(z, y)), 1.0 / len(batch))
    hl, hr = params.embed_sides(tape, batch, rng, dropout)
    si = [i for i, e in enumerate(batch) if e.kind == SYMBOLIC]
    fi = [i for i, e in enumerate(batch) if e.kind == FUNCEVAL]
    parts = []
    if si:
        z = params.head(tape, tape.gather_rows(hl, si), tape.gather_rows(hr, si))
        y = np.array([[float(batch[i].label)] for i in si])
        parts.append(tape.sum(tape.bce_logits(z, y)))
    if fi:
        dl = params.decode(tape, tape.gather_rows(hl, fi))
        dr = params.decode(tape, tape.gather_rows(hr, fi))
        sq = tape.square(tape.sub(dl, dr))
        ok = np.array([bool(batch[i].label) for i in fi])
        if ok.any():
            targets = targets or {}
            t = np.array([targets[batch[i].text] if batch[i].text in targets else _target(batch[i])
                          for i in fi], dtype=float).reshape(-1, 2)
            w = (ok & np.isfinite(t).all(axis=1)).astype(float)
            t = np.where(np.isfinite(t), t, 0.0)
            term = tape.add(sq, tape.square(tape.sub(dr, tape.const(t[:, 1:]))))
            if cfg.anchor_lhs:
                term = tape.add(term, tape.square(tape.sub(dl, tape.const(t[:, :1]))))
            parts.append(tape.weighted_sum(term, np.where(ok, w, 0.0)))
        if (~ok).any():
            hinge = tape.relu(tape.sub(tape.const(np.full(sq.value.shape, cfg.margin)), sq))
            parts.append(tape.weighted_sum(hinge, (~ok).astype(float)))
        if rng is not None and cfg.ae_weight > 0:
            grid = _grid_values()
            v = grid[rng.integers(grid.size, size=len(fi))]
            rec = params.decode(tape, params.encode_numbers(tape, v))
            err = tape.square(tape.sub(rec, tape.const(v.reshape(-1, 1))))
            parts.append(tape.scale(tape.sum(err), cfg.ae_weight))
    total = parts[0]
    for p in parts[1:]:
        total = tape.add(total, p)
    return tape.scale(total, 1.0 / len(batch))


def split_validation(eqs: Sequence[Equation], fraction: float, seed: int):
    """Seeded (train, validation) split; each kind is split separately."""
    if fraction <= 0:
        return list(eqs), []
    rng = np.random.default_rng([seed, 1])
    train, valid = [], []
    for kind in (SYMBOLIC, FUNCEVAL):
        part = [e for e in eqs if e.kind == kind]
        if not part:
            continue
        perm = rng.permutation(len(part))
        k = int(round(fraction * len(part)))
        valid.extend(part[i] for i in sorted(perm[:k]))
        train.extend(part[i] for i in sorted(perm[k:]))
    return train, valid


@dataclass
class TrainResult:
    params: ModelParams
    log: list
    tau: float | None
    best_epoch: int
    config: TrainConfig
    autoencoder_error: float | None = None


class Trainer:
    """Epoch-level training state that can be checkpointed and resumed."""

    def __init__(self, data: Sequence[Equation], cfg: TrainConfig, arch: str,
                 table: FunctionTable = DEFAULT_TABLE, variables: Sequence[str] = DEFAULT_VARIABLES):
        data = [e for e in data if e.label is not None]
        if not cfg.use_funceval:
            data = [e for e in data if e.kind == SYMBOLIC]
        if not data:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.arch = arch
        self.train, self.valid = split_validation(data, cfg.val_fraction, cfg.seed)
        self.params = ModelParams(arch, cfg.hidden_dim, table, variables, cfg.seed, cfg.head_bias)
        self.opt = Adam(self.params.n_params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.l2)
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.epoch = 0
        self.log: list[dict] = []
        self.best_score = -np.inf
        self.best_epoch = 0
        self.best_theta = self.params.theta.copy()
        self.autoencoder_error = None
        self.targets = {e.text: _target(e) for e in self.train if e.kind == FUNCEVAL and e.label}
        has_numbers = any(e.kind == FUNCEVAL for e in self.train)
        if self.params.is_tree and has_numbers and cfg.pretrain_steps:
            self.autoencoder_error = pretrain_autoencoder(self.params, cfg.pretrain_steps, cfg.pretrain_lr)
            log.info("autoencoder pretrained, max abs error %.4g", self.autoencoder_error)
            self.best_theta = self.params.theta.copy()

    @property
    def done(self) -> bool:
        if self.epoch >= self.cfg.epochs:
            return True
        return bool(self.cfg.patience) and self.epoch - self.best_epoch >= self.cfg.patience

    def run_epoch(self) -> float:
        cfg, params = self.cfg, self.params
        order = self.rng.permutation(len(self.train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [self.train[i] for i in order[start:start + cfg.batch_size]]
            tape = Tape()
            loss = batch_loss(params, tape, batch, cfg, self.rng, self.targets)
            value = float(loss.value.item())
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {self.epoch + 1}")
            params.store.zero_grad()
            tape.backward(loss)
            self.opt.step(params.theta, params.store.grad)
            total += value * len(batch)
        self.epoch += 1
        mean_loss = total / len(self.train)
        if self.valid:
            m = evaluate_model(self.valid, params)
            score = m.accuracy if m.n_symbolic else -m.mse
        else:
            m, score = Metrics(), -mean_loss
        row = m.row(self.epoch, "valid", self.arch)
        row["loss"] = mean_loss
        self.log.append(row)
        if score > self.best_score:
            self.best_score, self.best_epoch = score, self.epoch
            self.best_theta = params.theta.copy()
        log.debug("%s epoch %d loss %.4f score %.4f", self.arch, self.epoch, mean_loss, score)
        return mean_loss

    def finish(self) -> TrainResult:
        params = self.params.copy()
        if self.cfg.patience:
            params.theta[...] = self.best_theta
        tau = None
        fe_val = [e for e in self.valid if e.kind == FUNCEVAL]
        if params.is_tree and fe_val and len({bool(e.label) for e in fe_val}) == 2:
            tau = calibrate_funceval_threshold(fe_val, params)
        best = self.best_epoch if self.cfg.patience else self.epoch
        return TrainResult(params, list(self.log), tau, best, self.cfg, self.autoencoder_error)

    # ---------------------------------------------------------- checkpointing
    def state_bytes(self) -> bytes:
        meta = {"trainer": {"epoch": self.epoch, "best_score": float(self.best_score),
                            "best_epoch": self.best_epoch, "t": self.opt.t,
                            "rng": self.rng.bit_generator.state, "log": self.log,
                            "autoencoder_error": self.autoencoder_error},
                "config": asdict(self.cfg), "config_digest": self.cfg.digest()}
        return checkpoint_bytes(self.params, meta, {"adam_m": self.opt.m, "adam_v": self.opt.v,
                                                    "best_theta": self.best_theta})

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.state_bytes())

    @classmethod
    def resume(cls, path: str | Path, data: Sequence[Equation], cfg: TrainConfig) -> "Trainer":
        params, meta, extra = load_params(path, with_extra=True)
        if meta.get("config_digest") != cfg.digest():
            raise ValueError("training config differs from the checkpointed one")
        self = cls.__new__(cls)
        self.cfg, self.arch = cfg, params.arch
        filtered = [e for e in data if e.label is not None]
        if not cfg.use_funceval:
            filtered = [e for e in filtered if e.kind == SYMBOLIC]
        self.train, self.valid = split_validation(filtered, cfg.val_fraction, cfg.seed)
        self.params = params
        st = meta["trainer"]
        self.opt = Adam(params.n_params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.l2)
        self.opt.m[...] = extra["adam_m"]
        self.opt.v[...] = extra["adam_v"]
        self.opt.t = st["t"]
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = st["rng"]
        self.epoch, self.best_score, self.best_epoch = st["epoch"], st["best_score"], st["best_epoch"]
        self.best_theta = extra["best_theta"]
        self.log = list(st["log"])
        self.autoencoder_error = st["autoencoder_error"]
        self.targets = {e.text: _target(e) for e in self.train if e.kind == FUNCEVAL and e.label}
        return self


def train_model(train: Sequence[Equation], cfg: TrainConfig, arch: str,
                table: FunctionTable = DEFAULT_TABLE, variables: Sequence[str] = DEFAULT_VARIABLES,
                on_epoch: Callable[[Trainer], None] | None = None) -> TrainResult:
    """Train ``arch`` on labeled equations; returns params, epoch log, and tau."""
    trainer = Trainer(train, cfg, arch, table, variables)
    while not trainer.done:
        trainer.run_epoch()
        if on_epoch is not None:
            on_epoch(trainer)
    return trainer.finish()


def autoencoder_grid_error(params: ModelParams) -> float:
    values = np.array([e.value for e in number_grid()])
    return float(np.max(np.abs(autoencode(values, params) - values)))

