"""Tape-based reverse-mode automatic differentiation on dense 2-D arrays.

Every value is a ``(rows, cols)`` float64 array; rows index independent
items (tree nodes of one function, sequences at one time step) so a single
primitive can serve a whole group. Scalars are ``(1, 1)``.

    tape = Tape()
    w = tape.param(p)
    loss = tape.mean(tape.square(tape.matmul(x, w)))
    tape.backward(loss)      # accumulates into p.grad
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Param:
    """Named dense array with a persistent gradient accumulator.

    ``value`` and ``grad`` are usually views into flat buffers owned by a
    :class:`ParamStore` so optimizers can update everything at once.
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray, grad: np.ndarray | None = None):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value) if grad is None else grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class ParamStore:
    """Ordered collection of params backed by one flat value and grad buffer."""

    def __init__(self):
        self._specs: list[tuple[str, tuple[int, ...]]] = []
        self.params: dict[str, Param] = {}
        self.theta = np.zeros(0)
        self.grad = np.zeros(0)

    def declare(self, name: str, shape: tuple[int, ...]) -> None:
        if name in self.params or any(n == name for n, _ in self._specs):
            raise ValueError(f"duplicate param name {name!r}")
        self._specs.append((name, tuple(shape)))

    def allocate(self) -> None:
        total = sum(int(np.prod(s)) for _, s in self._specs)
        self.theta = np.zeros(total)
        self.grad = np.zeros(total)
        offset = 0
        for name, shape in self._specs:
            n = int(np.prod(shape))
            self.params[name] = Param(name, self.theta[offset:offset + n].reshape(shape),
                                      self.grad[offset:offset + n].reshape(shape))
            offset += n

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def zero_grad(self):
        self.grad[...] = 0.0


class Value:
    """A node on the tape: cached forward value plus adjoint slot."""

    __slots__ = ("value", "grad", "needs_grad", "_backward", "_param")

    def __init__(self, value: np.ndarray, needs_grad: bool = False):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad
        self._backward = None
        self._param = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Value(shape={self.value.shape})"


def _acc(v: Value, g: np.ndarray) -> None:
    if v.needs_grad:
        v.grad = g if v.grad is None else v.grad + g


def _as2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    return a


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Tape:
    """Append-only record of operations; backward walks it in reverse.

    With ``grad=False`` nothing is recorded and operations just compute values
    (evaluation mode).
    """

    def __init__(self, grad: bool = True):
        self.grad_enabled = grad
        self.nodes: list[Value] = []
        self._params: dict[int, Value] = {}

    def clear(self) -> None:
        self.nodes.clear()
        self._params.clear()

    def __len__(self):
        return len(self.nodes)

    # ------------------------------------------------------------ leaves
    def const(self, a) -> Value:
        return Value(_as2d(a), False)

    def param(self, p: Param) -> Value:
        v = self._params.get(id(p))
        if v is None:
            v = Value(p.value, self.grad_enabled)
            v._param = p
            if self.grad_enabled:
                self._params[id(p)] = v
                self.nodes.append(v)
        return v

    def _record(self, out: np.ndarray, parents: Sequence[Value],
                backward: Callable[[np.ndarray], None]) -> Value:
        if self.grad_enabled and any(p.needs_grad for p in parents):
            v = Value(out, True)
            v._backward = backward
            self.nodes.append(v)
            return v
        return Value(out, False)

    # ------------------------------------------------------------ linear algebra
    def matmul(self, x: Value, w: Value) -> Value:
        """Row-batched matrix-vector product: ``x @ w.T`` for x (n, k), w (m, k)."""
        if x.value.shape[1] != w.value.shape[1]:
            raise ShapeError(f"matmul {x.value.shape} x {w.value.shape}^T")
        out = x.value @ w.value.T

        def backward(g):
            if x.needs_grad:
                _acc(x, g @ w.value)
            if w.needs_grad:
                _acc(w, g.T @ x.value)
        return self._record(out, (x, w), backward)

    matvec = matmul

    def add(self, a: Value, b: Value) -> Value:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add {a.value.shape} + {b.value.shape}")

        def backward(g):
            _acc(a, g)
            _acc(b, g)
        return self._record(a.value + b.value, (a, b), backward)

    def sub(self, a: Value, b: Value) -> Value:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"sub {a.value.shape} - {b.value.shape}")

        def backward(g):
            _acc(a, g)
            _acc(b, -g)
        return self._record(a.value - b.value, (a, b), backward)

    def add_row(self, a: Value, b: Value) -> Value:
        """Add a bias row ``b`` (k,) or (1, k) to every row of ``a`` (n, k)."""
        bv = b.value.reshape(1, -1)
        if bv.shape[1] != a.value.shape[1]:
            raise ShapeError(f"add_row {a.value.shape} + {b.value.shape}")
        bshape = b.value.shape

        def backward(g):
            _acc(a, g)
            if b.needs_grad:
                _acc(b, g.sum(axis=0).reshape(bshape))
        return self._record(a.value + bv, (a, b), backward)

    def hadamard(self, a: Value, b: Value) -> Value:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"hadamard {a.value.shape} * {b.value.shape}")

        def backward(g):
            if a.needs_grad:
                _acc(a, g * b.value)
            if b.needs_grad:
                _acc(b, g * a.value)
        return self._record(a.value * b.value, (a, b), backward)

    def scale(self, a: Value, c: float) -> Value:
        def backward(g):
            _acc(a, g * c)
        return self._record(a.value * c, (a,), backward)

    def dot(self, a: Value, b: Value) -> Value:
        """Row-wise inner product: (n, k), (n, k) -> (n, 1)."""
        if a.value.shape != b.value.shape:
            raise ShapeError(f"dot {a.value.shape} . {b.value.shape}")
        out = np.sum(a.value * b.value, axis=1, keepdims=True)

        def backward(g):
            if a.needs_grad:
                _acc(a, g * b.value)
            if b.needs_grad:
                _acc(b, g * a.value)
        return self._record(out, (a, b), backward)

    # ------------------------------------------------------------ structure
    def concat(self, parts: Sequence[Value]) -> Value:
        """Concatenate along columns."""
        rows = {p.value.shape[0] for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"concat row mismatch {[p.value.shape for p in parts]}")
        widths = [p.value.shape[1] for p in parts]
        bounds = np.cumsum([0] + widths)

        def backward(g):
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                _acc(p, g[:, lo:hi])
        return self._record(np.concatenate([p.value for p in parts], axis=1), parts, backward)

    def concat_rows(self, parts: Sequence[Value]) -> Value:
        cols = {p.value.shape[1] for p in parts}
        if len(cols) != 1:
            raise ShapeError(f"concat_rows col mismatch {[p.value.shape for p in parts]}")
        heights = [p.value.shape[0] for p in parts]
        bounds = np.cumsum([0] + heights)

        def backward(g):
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                _acc(p, g[lo:hi])
        return self._record(np.concatenate([p.value for p in parts], axis=0), parts, backward)

    def slice_cols(self, a: Value, lo: int, hi: int) -> Value:
        shape = a.value.shape

        def backward(g):
            full = np.zeros(shape)
            full[:, lo:hi] = g
            _acc(a, full)
        return self._record(a.value[:, lo:hi], (a,), backward)

    def slice_rows(self, a: Value, lo: int, hi: int) -> Value:
        shape = a.value.shape

        def backward(g):
            full = np.zeros(shape)
            full[lo:hi] = g
            _acc(a, full)
        return self._record(a.value[lo:hi], (a,), backward)

    def gather_rows(self, a: Value, idx) -> Value:
        """Rows ``a[idx]``; repeated indices accumulate on the way back."""
        idx = np.asarray(idx, dtype=np.intp)
        shape = a.value.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            _acc(a, full)
        return self._record(a.value[idx], (a,), backward)

    # ------------------------------------------------------------ nonlinearities
    def tanh(self, a: Value) -> Value:
        out = np.tanh(a.value)

        def backward(g):
            _acc(a, g * (1.0 - out * out))
        return self._record(out, (a,), backward)

    tanhE = tanh

    def sigmoid(self, a: Value) -> Value:
        out = _sigmoid(a.value)

        def backward(g):
            _acc(a, g * out * (1.0 - out))
        return self._record(out, (a,), backward)

    sigmoidE = sigmoid

    def relu(self, a: Value) -> Value:
        mask = a.value > 0

        def backward(g):
            _acc(a, g * mask)
        return self._record(a.value * mask, (a,), backward)

    def square(self, a: Value) -> Value:
        def backward(g):
            _acc(a, 2.0 * g * a.value)
        return self._record(a.value * a.value, (a,), backward)

    def dropout(self, a: Value, rate: float, rng: np.random.Generator | None) -> Value:
        """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
        if rate <= 0 or rng is None:
            return a
        keep = (rng.random(a.value.shape) >= rate) / (1.0 - rate)

        def backward(g):
            _acc(a, g * keep)
        return self._record(a.value * keep, (a,), backward)

    dropoutMask = dropout

    # ------------------------------------------------------------ reductions and losses
    def sum(self, a: Value) -> Value:
        shape = a.value.shape

        def backward(g):
            _acc(a, np.broadcast_to(g, shape).copy())
        return self._record(np.array([[a.value.sum()]]), (a,), backward)

    def mean(self, a: Value) -> Value:
        n = a.value.size
        shape = a.value.shape

        def backward(g):
            _acc(a, np.full(shape, g.item() / n))
        return self._record(np.array([[a.value.mean()]]), (a,), backward)

    def weighted_sum(self, a: Value, w) -> Value:
        """``sum(w * a)`` for a constant weight array ``w`` of a's shape."""
        w = np.asarray(w, dtype=float).reshape(a.value.shape)

        def backward(g):
            _acc(a, g.item() * w)
        return self._record(np.array([[float(np.sum(w * a.value))]]), (a,), backward)

    def mse(self, pred: Value, target) -> Value:
        """Mean squared error against a constant target."""
        t = _as2d(target).reshape(pred.value.shape)
        diff = pred.value - t
        n = diff.size

        def backward(g):
            _acc(pred, g.item() * 2.0 * diff / n)
        return self._record(np.array([[np.mean(diff * diff)]]), (pred,), backward)

    def bce(self, prob: Value, labels) -> Value:
        """Mean binary cross-entropy of probabilities against 0/1 labels."""
        y = _as2d(labels).reshape(prob.value.shape)
        p = np.clip(prob.value, 1e-12, 1 - 1e-12)
        n = p.size

        def backward(g):
            _acc(prob, g.item() * (p - y) / (p * (1 - p)) / n)
        out = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        return self._record(np.array([[out]]), (prob,), backward)

    def bce_logits(self, logits: Value, labels) -> Value:
        """Per-row BCE of ``sigmoid(logits)``, computed stably; returns (n, 1)."""
        y = _as2d(labels).reshape(logits.value.shape)
        z = logits.value
        out = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        p = _sigmoid(z)

        def backward(g):
            _acc(logits, g * (p - y))
        return self._record(out, (logits,), backward)

    # ------------------------------------------------------------ backward
    def backward(self, loss: Value) -> None:
        """Populate adjoints from a scalar ``loss`` and accumulate into params."""
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if not self.grad_enabled:
            raise RuntimeError("tape was created with grad=False")
        if not loss.needs_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g)
            elif node._param is not None:
                node._param.grad += g
            node.grad = None


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(loss_fn: Callable[[], float], theta: np.ndarray, eps: float = 1e-5,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central finite differences of ``loss_fn`` w.r.t. the flat ``theta`` (in place)."""
    idx = range(theta.size) if indices is None else indices
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        old = theta[i]
        theta[i] = old + eps
        up = loss_fn()
        theta[i] = old - eps
        down = loss_fn()
        theta[i] = old
        out[j] = (up - down) / (2 * eps)
    return out
