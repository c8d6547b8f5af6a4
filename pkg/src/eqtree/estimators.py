"""scikit-learn wrappers: an equation verifier and a number autoencoder."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import Tape
from .grammar import DEFAULT_TABLE, DEFAULT_VARIABLES, FUNCEVAL, Equation, number_grid
from .models import ModelParams, verify_funceval_model, verify_symbolic
from .training import TrainConfig, pretrain_autoencoder, train_model


def _as_equations(X, table=DEFAULT_TABLE) -> list[Equation]:
    out = []
    for x in X:
        if isinstance(x, Equation):
            out.append(x)
        elif isinstance(x, str):
            out.append(Equation.parse(x, table=table))
        else:
            raise TypeError(f"expected an Equation or 'lhs = rhs' text, got {type(x).__name__}")
    return out


class EquationVerifier(ClassifierMixin, BaseEstimator):
    """Classify equations as correct or incorrect.

    ``X`` is a sequence of :class:`Equation` objects or ``"lhs = rhs"``
    s-expression strings; the equation kind is inferred. Symbolic equations
    are scored by the verification head. Function-evaluation equations
    (tree models only) are scored through the decoded sides: the probability
    is ``tau / (tau + sq)`` so the calibrated threshold maps to 0.5.

    ``pos_label`` names the class meaning "correct"; by default it is the
    larger of the two classes (``True`` or ``1`` for boolean or 0/1 labels).
    """

    def __init__(self, arch="treelstm", hidden_dim=50, epochs=100, lr=1e-3, l2=1e-5, dropout=0.2,
                 batch_size=32, patience=0, val_fraction=0.1, head_bias=True,
                 pretrain_steps=2000, pos_label=None, random_state=0):
        self.arch = arch
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.lr = lr
        self.l2 = l2
        self.dropout = dropout
        self.batch_size = batch_size
        self.patience = patience
        self.val_fraction = val_fraction
        self.head_bias = head_bias
        self.pretrain_steps = pretrain_steps
        self.pos_label = pos_label
        self.random_state = random_state

    def _config(self, use_funceval: bool) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, l2=self.l2, dropout=self.dropout,
                           hidden_dim=self.hidden_dim, seed=int(self.random_state or 0),
                           batch_size=self.batch_size, use_funceval=use_funceval,
                           pretrain_steps=self.pretrain_steps, patience=self.patience,
                           val_fraction=self.val_fraction, head_bias=self.head_bias)

    def fit(self, X, y=None):
        eqs = _as_equations(X)
        if y is None:
            if any(e.label is None for e in eqs):
                raise ValueError("y is required for unlabeled equations")
            y = [e.label for e in eqs]
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(eqs):
            raise ValueError("y must be one label per equation")
        self.classes_ = np.unique(y)
        if self.classes_.size != 2:
            raise ValueError("EquationVerifier needs exactly two classes")
        pos = self.classes_[1] if self.pos_label is None else self.pos_label
        if pos not in self.classes_:
            raise ValueError(f"pos_label {pos!r} is not one of the classes {list(self.classes_)}")
        self.pos_index_ = int(np.flatnonzero(self.classes_ == pos)[0])
        labels = y == pos
        eqs = [Equation(e.lhs, e.rhs, bool(lab), e.kind) for e, lab in zip(eqs, labels)]
        use_fe = any(e.kind == FUNCEVAL for e in eqs)
        res = train_model(eqs, self._config(use_fe), self.arch)
        self.params_ = res.params
        self.tau_ = res.tau if res.tau is not None else TrainConfig().margin
        self.n_epochs_ = len(res.log)
        self.best_epoch_ = res.best_epoch
        self.log_ = res.log
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        eqs = _as_equations(X, self.params_.table)
        p = np.zeros(len(eqs))
        fe = [i for i, e in enumerate(eqs) if e.kind == FUNCEVAL and self.params_.is_tree]
        fe_set = set(fe)
        sym = [i for i in range(len(eqs)) if i not in fe_set]
        if sym:
            p[sym] = verify_symbolic([eqs[i] for i in sym], self.params_)
        if fe:
            _, _, sq = verify_funceval_model([eqs[i] for i in fe], self.params_)
            p[fe] = self.tau_ / (self.tau_ + sq)
        out = np.empty((len(eqs), 2))
        out[:, self.pos_index_] = p
        out[:, 1 - self.pos_index_] = 1.0 - p
        return out

    def predict(self, X):
        check_is_fitted(self, "params_")
        p = self.predict_proba(X)[:, self.pos_index_]
        return np.where(p >= 0.5, self.classes_[self.pos_index_], self.classes_[1 - self.pos_index_])


class NumberAutoencoder(TransformerMixin, BaseEstimator):
    """Map scalars to ``hidden_dim`` embeddings and back.

    ``fit`` pretrains on ``X`` (default: the precision-2 grid in
    [-3.14, 3.14]); ``transform`` encodes, ``inverse_transform`` decodes.
    """

    def __init__(self, hidden_dim=50, steps=2000, lr=2e-2, polish=300, random_state=0):
        self.hidden_dim = hidden_dim
        self.steps = steps
        self.lr = lr
        self.polish = polish
        self.random_state = random_state

    @staticmethod
    def _values(X) -> np.ndarray:
        v = np.asarray(X, dtype=float)
        if v.ndim == 2 and v.shape[1] == 1:
            v = v[:, 0]
        if v.ndim != 1:
            raise ValueError("expected a 1-D array of numbers or an (n, 1) column")
        if not np.all(np.isfinite(v)):
            raise ValueError("input contains non-finite values")
        return v

    def fit(self, X=None, y=None):
        values = (np.array([e.value for e in number_grid()]) if X is None else self._values(X))
        self.params_ = ModelParams("treelstm", self.hidden_dim, DEFAULT_TABLE, DEFAULT_VARIABLES,
                                   int(self.random_state or 0))
        self.max_error_ = pretrain_autoencoder(self.params_, self.steps, self.lr, values,
                                               self.polish)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        tape = Tape(grad=False)
        return self.params_.encode_numbers(tape, self._values(X)).value.copy()

    def inverse_transform(self, H):
        check_is_fitted(self, "params_")
        H = np.asarray(H, dtype=float)
        if H.ndim != 2 or H.shape[1] != self.hidden_dim:
            raise ValueError(f"expected embeddings of shape (n, {self.hidden_dim})")
        tape = Tape(grad=False)
        return self.params_.decode(tape, tape.const(H)).value[:, 0].copy()

    def score(self, X, y=None):
        """Negative max abs round-trip error."""
        v = self._values(X)
        return -float(np.max(np.abs(self.inverse_transform(self.transform(v)) - v)))
