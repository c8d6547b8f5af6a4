"""Tree-structured and chain-structured equation models.

A model embeds each side of an equation separately. Tree models compose a
per-function cell bottom-up along the parse tree; chain models run one
recurrent cell over the prefix token stream ``lhs = rhs``.

Evaluation is batched: all nodes of equal height that apply the same function
are pushed through their cell as one matrix, and identical subtrees inside a
batch are computed once.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ParamStore, Tape, Value
from .grammar import (CONSTANTS, DEFAULT_TABLE, DEFAULT_VARIABLES, FUNCTION, NUMBER,
                      Equation, Expr, FunctionTable)

TREE_LSTM = "treelstm"
TREE_NN = "treenn"
LSTM = "lstm"
RNN = "rnn"
ARCHS = (RNN, LSTM, TREE_NN, TREE_LSTM)
TREE_ARCHS = (TREE_NN, TREE_LSTM)

SEP = "="
CHECKPOINT_MAGIC = b"EQTREE-PARAMS\n"
CHECKPOINT_VERSION = 1

_SYM, _NUM, _UNARY, _BINARY = 0, 1, 2, 3


class UnknownSymbol(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _xavier(rng, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, (rows, cols))


@dataclass
class TreePlan:
    """Schedule for evaluating a batch of expressions level by level."""

    n_nodes: int
    sym_codes: np.ndarray
    num_values: np.ndarray
    levels: list            # per height >= 2: list of (fn, arity, child_rows...)
    roots: np.ndarray


class ModelParams:
    """Weights of one architecture plus the vocabulary they were built for."""

    def __init__(self, arch: str, d: int, table: FunctionTable = DEFAULT_TABLE,
                 variables: Sequence[str] = DEFAULT_VARIABLES, seed: int = 0,
                 head_bias: bool = True):
        if arch not in ARCHS:
            raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
        if d < 1:
            raise ValueError("hidden dim must be positive")
        self.arch = arch
        self.d = int(d)
        self.table = table
        self.variables = tuple(variables)
        self.seed = int(seed)
        self.head_bias = bool(head_bias) and arch in TREE_ARCHS
        self.symbols = tuple(CONSTANTS) + self.variables
        self.sym_index = {s: i for i, s in enumerate(self.symbols)}
        self.tokens = tuple(table.names) + self.symbols + (SEP,)
        self.tok_index = {s: i for i, s in enumerate(self.tokens)}
        self.store = ParamStore()
        self._gate_layout: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        self._declare()
        self.store.allocate()
        self.initialize(np.random.default_rng(self.seed))

    # ------------------------------------------------------------ layout
    @property
    def is_tree(self) -> bool:
        return self.arch in TREE_ARCHS

    def _param(self, name, rows, cols, gates=1, forget=()):
        self.store.declare(name + ".W", (rows * gates, cols))
        self.store.declare(name + ".b", (rows * gates,))
        self._gate_layout[name] = (rows, cols, tuple(forget))

    def _declare(self):
        d = self.d
        self._param("enc1", d, 1)
        self._param("enc2", d, d)
        if self.is_tree:
            self._param("sym", d, len(self.symbols))
            self._param("dec1", d, d)
            self._param("dec2", 1, d)
            if self.head_bias:
                self.store.declare("head.b", (1,))
            for f in self.table.names:
                k = self.table.arity(f)
                if self.arch == TREE_LSTM:
                    # gates [i, o, f_1..f_k, u]
                    self._param("cell." + f, d, k * d, gates=3 + k, forget=tuple(range(2, 2 + k)))
                else:
                    self._param("cell." + f, d, k * d)
        else:
            self._param("tok", d, len(self.tokens))
            if self.arch == LSTM:
                self._param("rec", d, 2 * d, gates=4, forget=(2,))
            else:
                self._param("rec", d, 2 * d)
            self._param("out", 1, d)

    def initialize(self, rng: np.random.Generator) -> None:
        for name, (rows, cols, forget) in self._gate_layout.items():
            W = self.store[name + ".W"].value
            b = self.store[name + ".b"].value
            for g in range(W.shape[0] // rows):
                W[g * rows:(g + 1) * rows] = _xavier(rng, rows, cols)
            b[...] = 0.0
            for g in forget:
                b[g * rows:(g + 1) * rows] = 1.0

    def p(self, tape: Tape, name: str) -> Value:
        return tape.param(self.store[name])

    @property
    def theta(self) -> np.ndarray:
        return self.store.theta

    def n_params(self) -> int:
        return self.store.theta.size

    # ------------------------------------------------------------ building blocks
    def _dense(self, tape, x, name):
        return tape.add_row(tape.matmul(x, self.p(tape, name + ".W")), self.p(tape, name + ".b"))

    def encode_numbers(self, tape: Tape, values) -> Value:
        x = tape.const(np.asarray(values, dtype=float).reshape(-1, 1))
        return self._dense(tape, tape.tanh(self._dense(tape, x, "enc1")), "enc2")

    def decode(self, tape: Tape, h: Value) -> Value:
        if not self.is_tree:
            raise ValueError("chain models have no number decoder")
        return self._dense(tape, tape.tanh(self._dense(tape, h, "dec1")), "dec2")

    def embed_symbols(self, tape: Tape, codes) -> Value:
        codes = np.asarray(codes, dtype=np.intp)
        onehot = np.zeros((codes.size, len(self.symbols)))
        onehot[np.arange(codes.size), codes] = 1.0
        return self._dense(tape, tape.const(onehot), "sym")

    # ------------------------------------------------------------ tree models
    def _leaf_code(self, e: Expr) -> int:
        code = self.sym_index.get(e.head)
        if code is None:
            raise UnknownSymbol(f"unknown symbol {e.head!r}")
        return code

    def plan(self, exprs: Sequence[Expr]) -> TreePlan:
        ids: dict[str, int] = {}
        typ, code, val, kids, height = [], [], [], [], []

        def visit(e: Expr) -> int:
            key = str(e)
            i = ids.get(key)
            if i is not None:
                return i
            if e.kind == FUNCTION:
                arity = self.table.arity(e.head)
                if arity is None or arity != len(e.args):
                    raise UnknownSymbol(f"unknown function {e.head!r}/{len(e.args)}")
                ch = [visit(a) for a in e.args]
                typ.append(_UNARY if arity == 1 else _BINARY)
                code.append(self.table.names.index(e.head))
                val.append(0.0)
                kids.append(ch)
                height.append(1 + max(height[c] for c in ch))
            elif e.kind == NUMBER:
                typ.append(_NUM)
                code.append(0)
                val.append(e.value)
                kids.append(())
                height.append(1)
            else:
                typ.append(_SYM)
                code.append(self._leaf_code(e))
                val.append(0.0)
                kids.append(())
                height.append(1)
            ids[key] = len(typ) - 1
            return ids[key]

        roots = [visit(e) for e in exprs]
        typ_a = np.asarray(typ)
        code_a = np.asarray(code)
        h_a = np.asarray(height)
        group = np.where(typ_a >= _UNARY, code_a, 0)
        order = np.lexsort((group, typ_a, h_a))
        rank = np.empty(len(typ), dtype=np.intp)
        rank[order] = np.arange(len(typ))

        sym_nodes = order[(typ_a[order] == _SYM)]
        num_nodes = order[(typ_a[order] == _NUM)]
        levels = []
        inner = order[h_a[order] >= 2]
        start = 0
        while start < len(inner):
            hh = h_a[inner[start]]
            level = []
            while start < len(inner) and h_a[inner[start]] == hh:
                g = group[inner[start]]
                end = start
                while end < len(inner) and h_a[inner[end]] == hh and group[inner[end]] == g:
                    end += 1
                nodes = inner[start:end]
                arity = 1 if typ_a[nodes[0]] == _UNARY else 2
                child_rows = tuple(np.asarray([rank[kids[n][j]] for n in nodes], dtype=np.intp)
                                   for j in range(arity))
                level.append((self.table.names[g], arity, child_rows))
                start = end
            levels.append(level)
        return TreePlan(len(typ), code_a[sym_nodes], np.asarray(val)[num_nodes], levels,
                        rank[np.asarray(roots, dtype=np.intp)])

    def _lstm_cell(self, tape, name, children, rng, dropout):
        d = self.d
        k = len(children)
        hs = [tape.slice_cols(s, 0, d) for s in children]
        x = hs[0] if k == 1 else tape.concat(hs)
        x = tape.dropout(x, dropout, rng)
        z = self._dense(tape, x, name)
        gates = tape.sigmoid(tape.slice_cols(z, 0, (2 + k) * d))
        u = tape.tanh(tape.slice_cols(z, (2 + k) * d, (3 + k) * d))
        i = tape.slice_cols(gates, 0, d)
        o = tape.slice_cols(gates, d, 2 * d)
        c = tape.hadamard(i, u)
        for j, s in enumerate(children):
            f = tape.slice_cols(gates, (2 + j) * d, (3 + j) * d)
            c = tape.add(c, tape.hadamard(f, tape.slice_cols(s, d, 2 * d)))
        h = tape.hadamard(o, tape.tanh(c))
        return tape.concat([h, c])

    def _nn_cell(self, tape, name, children, rng, dropout):
        x = children[0] if len(children) == 1 else tape.concat(children)
        x = tape.dropout(x, dropout, rng)
        return tape.tanh(self._dense(tape, x, name))

    def embed_plan(self, tape: Tape, plan: TreePlan, rng=None, dropout: float = 0.0) -> Value:
        """Root states of every planned expression, shape (n_roots, d or 2d)."""
        if not self.is_tree:
            raise ValueError(f"{self.arch} is not a tree model")
        lstm = self.arch == TREE_LSTM
        parts = []
        if plan.sym_codes.size:
            parts.append(self.embed_symbols(tape, plan.sym_codes))
        if plan.num_values.size:
            parts.append(self.encode_numbers(tape, plan.num_values))
        S = parts[0] if len(parts) == 1 else tape.concat_rows(parts)
        if lstm:
            S = tape.concat([S, tape.const(np.zeros((S.value.shape[0], self.d)))])
        cell = self._lstm_cell if lstm else self._nn_cell
        for level in plan.levels:
            outs = [S]
            for fn, _arity, child_rows in level:
                children = [tape.gather_rows(S, rows) for rows in child_rows]
                outs.append(cell(tape, "cell." + fn, children, rng, dropout))
            S = tape.concat_rows(outs)
        return tape.gather_rows(S, plan.roots)

    def embed_exprs(self, tape: Tape, exprs: Sequence[Expr], rng=None, dropout: float = 0.0) -> Value:
        """Hidden vectors ``h`` of each expression, shape (n, d)."""
        roots = self.embed_plan(tape, self.plan(exprs), rng, dropout)
        return tape.slice_cols(roots, 0, self.d) if self.arch == TREE_LSTM else roots

    def embed_sides(self, tape, eqs: Sequence[Equation], rng=None, dropout=0.0):
        n = len(eqs)
        H = self.embed_exprs(tape, [e.lhs for e in eqs] + [e.rhs for e in eqs], rng, dropout)
        return tape.slice_rows(H, 0, n), tape.slice_rows(H, n, 2 * n)

    # ------------------------------------------------------------ chain models
    def token_stream(self, eq: Equation) -> list:
        """Prefix tokens of ``lhs = rhs``; numbers stay as floats."""
        out = []
        for side in (eq.lhs, None, eq.rhs):
            if side is None:
                out.append(SEP)
                continue
            for _, node in side.walk():
                if node.kind == NUMBER:
                    out.append(node.value)
                elif node.head in self.tok_index:
                    out.append(node.head)
                else:
                    raise UnknownSymbol(f"unknown symbol {node.head!r}")
        return out

    def chain_logits(self, tape: Tape, eqs: Sequence[Equation], rng=None, dropout=0.0) -> Value:
        if self.is_tree:
            raise ValueError(f"{self.arch} is not a chain model")
        d = self.d
        streams = [self.token_stream(e) for e in eqs]
        nums = sorted({t for s in streams for t in s if not isinstance(t, str)})
        num_row = {v: len(self.tokens) + i for i, v in enumerate(nums)}
        E = self._dense(tape, tape.const(np.eye(len(self.tokens))), "tok")
        if nums:
            E = tape.concat_rows([E, self.encode_numbers(tape, nums)])
        lengths = np.array([len(s) for s in streams])
        order = np.argsort(-lengths, kind="stable")
        n, T = len(eqs), int(lengths.max())
        idx = np.zeros((n, T), dtype=np.intp)
        for r, i in enumerate(order):
            idx[r, :lengths[i]] = [self.tok_index[t] if isinstance(t, str) else num_row[t]
                                   for t in streams[i]]
        active = np.array([(lengths > t).sum() for t in range(T)])
        h = tape.const(np.zeros((n, d)))
        c = tape.const(np.zeros((n, d))) if self.arch == LSTM else None
        for t in range(T):
            m = int(active[t])
            x = tape.dropout(tape.gather_rows(E, idx[:m, t]), dropout, rng)
            hp = h if m == n else tape.slice_rows(h, 0, m)
            z = self._dense(tape, tape.concat([x, hp]), "rec")
            if self.arch == LSTM:
                cp = c if m == n else tape.slice_rows(c, 0, m)
                g = tape.sigmoid(tape.slice_cols(z, 0, 3 * d))
                u = tape.tanh(tape.slice_cols(z, 3 * d, 4 * d))
                cn = tape.add(tape.hadamard(tape.slice_cols(g, 0, d), u),
                              tape.hadamard(tape.slice_cols(g, 2 * d, 3 * d), cp))
                hn = tape.hadamard(tape.slice_cols(g, d, 2 * d), tape.tanh(cn))
                c = cn if m == n else tape.concat_rows([cn, tape.slice_rows(c, m, n)])
            else:
                hn = tape.tanh(z)
            h = hn if m == n else tape.concat_rows([hn, tape.slice_rows(h, m, n)])
        inv = np.empty(n, dtype=np.intp)
        inv[order] = np.arange(n)
        return self._dense(tape, tape.gather_rows(h, inv), "out")

    # ------------------------------------------------------------ heads
    def head(self, tape: Tape, hl: Value, hr: Value) -> Value:
        """Verification score ``<hl, hr>`` plus the optional learned scalar bias."""
        z = tape.dot(hl, hr)
        return tape.add_row(z, self.p(tape, "head.b")) if self.head_bias else z

    def symbolic_logits(self, tape: Tape, eqs: Sequence[Equation], rng=None, dropout=0.0) -> Value:
        """Pre-sigmoid verification scores, shape (n, 1)."""
        if not self.is_tree:
            return self.chain_logits(tape, eqs, rng, dropout)
        hl, hr = self.embed_sides(tape, eqs, rng, dropout)
        return self.head(tape, hl, hr)

    def funceval_outputs(self, tape: Tape, eqs: Sequence[Equation], rng=None, dropout=0.0):
        """Decoded (lhs, rhs) values, each (n, 1)."""
        hl, hr = self.embed_sides(tape, eqs, rng, dropout)
        return self.decode(tape, hl), self.decode(tape, hr)

    # ------------------------------------------------------------ comparison
    def same_layout(self, other: "ModelParams") -> bool:
        return (self.arch, self.d, self.table, self.variables, self.head_bias) == \
            (other.arch, other.d, other.table, other.variables, other.head_bias)

    def copy(self) -> "ModelParams":
        out = ModelParams(self.arch, self.d, self.table, self.variables, self.seed, self.head_bias)
        out.theta[...] = self.theta
        return out

    def __reduce__(self):
        # parameter views must stay tied to theta, so pickle via the checkpoint format
        return _from_checkpoint, (checkpoint_bytes(self),)


# ---------------------------------------------------------------- evaluation helpers

def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def embed_expr(e: Expr, params: ModelParams, rng=None, dropout: float = 0.0) -> np.ndarray:
    """Embedding of one expression: ``h`` (TreeNN) or ``[h, c]`` (TreeLSTM)."""
    tape = Tape(grad=False)
    return params.embed_plan(tape, params.plan([e]), rng, dropout).value[0].copy()


def verify_symbolic(eqs: Sequence[Equation], params: ModelParams, chunk: int = 256) -> np.ndarray:
    """Probability that each equation is correct (eval mode)."""
    out = []
    for part in _chunks(list(eqs), chunk):
        out.append(_sigmoid(params.symbolic_logits(Tape(grad=False), part).value[:, 0]))
    return np.concatenate(out) if out else np.zeros(0)


def verify_funceval_model(eqs: Sequence[Equation], params: ModelParams, chunk: int = 256):
    """(decoded lhs, decoded rhs, squared error) arrays for each equation."""
    ls, rs = [], []
    for part in _chunks(list(eqs), chunk):
        dl, dr = params.funceval_outputs(Tape(grad=False), part)
        ls.append(dl.value[:, 0])
        rs.append(dr.value[:, 0])
    if not ls:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    dl, dr = np.concatenate(ls), np.concatenate(rs)
    return dl, dr, (dl - dr) ** 2


def chain_forward(eqs: Sequence[Equation], params: ModelParams, chunk: int = 256) -> np.ndarray:
    return verify_symbolic(eqs, params, chunk)


def autoencode(values, params: ModelParams) -> np.ndarray:
    tape = Tape(grad=False)
    return params.decode(tape, params.encode_numbers(tape, values)).value[:, 0]


# ---------------------------------------------------------------- checkpoints

def _header(params: ModelParams, meta: dict) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "arch": params.arch,
        "d": params.d,
        "unary": list(params.table.unary),
        "binary": list(params.table.binary),
        "variables": list(params.variables),
        "seed": params.seed,
        "head_bias": params.head_bias,
        "params": [[name, list(p.shape)] for name, p in params.store.params.items()],
        "meta": meta,
    }


def checkpoint_bytes(params: ModelParams, meta: dict | None = None,
                     extra: dict[str, np.ndarray] | None = None) -> bytes:
    """Serialize params (and optional float64 arrays such as optimizer state)."""
    header = _header(params, dict(meta or {}))
    extra = dict(extra or {})
    header["extra"] = [[k, int(np.asarray(v).size)] for k, v in sorted(extra.items())]
    blob = [CHECKPOINT_MAGIC, json.dumps(header, sort_keys=True).encode(), b"\n",
            params.theta.astype("<f8").tobytes()]
    for k, _ in header["extra"]:
        blob.append(np.asarray(extra[k], dtype="<f8").ravel().tobytes())
    return b"".join(blob)


def save_params(params: ModelParams, path: str | Path, meta: dict | None = None,
                extra: dict[str, np.ndarray] | None = None) -> str:
    """Write a checkpoint; returns its sha256 digest."""
    data = checkpoint_bytes(params, meta, extra)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_params(path: str | Path, table: FunctionTable | None = None,
                with_extra: bool = False):
    """Read a checkpoint written by :func:`save_params`.

    Returns ``(params, meta)`` or ``(params, meta, extra)``. Raises
    :class:`CheckpointError` on version, layout, or function-table mismatch.
    """
    return params_from_bytes(Path(path).read_bytes(), table, with_extra, str(path))


def params_from_bytes(data: bytes, table: FunctionTable | None = None,
                      with_extra: bool = False, source: str = "checkpoint"):
    """Inverse of :func:`checkpoint_bytes`; see :func:`load_params`."""
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{source}: not an eqtree checkpoint")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {header.get('version')}")
    stored = FunctionTable(tuple(header["unary"]), tuple(header["binary"]))
    if table is not None and table != stored:
        raise CheckpointError(f"{source}: checkpoint function table differs from the requested one")
    params = ModelParams(header["arch"], header["d"], stored, header["variables"], header["seed"],
                         header.get("head_bias", False))
    layout = [[n, list(p.shape)] for n, p in params.store.params.items()]
    if layout != header["params"]:
        raise CheckpointError(f"{source}: parameter layout mismatch")
    body = rest[nl + 1:]
    n = params.theta.size
    need = 8 * (n + sum(size for _, size in header.get("extra", [])))
    if len(body) != need:
        raise CheckpointError(f"{source}: expected {need} payload bytes, found {len(body)}")
    params.theta[...] = np.frombuffer(body[:8 * n], dtype="<f8")
    extra, off = {}, 8 * n
    for k, size in header.get("extra", []):
        extra[k] = np.frombuffer(body[off:off + 8 * size], dtype="<f8").copy()
        off += 8 * size
    if with_extra:
        return params, header["meta"], extra
    return params, header["meta"]


def _from_checkpoint(data: bytes) -> ModelParams:
    return params_from_bytes(data)[0]
