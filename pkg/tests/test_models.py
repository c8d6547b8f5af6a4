import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqtree.autodiff import Tape
from eqtree.grammar import FUNCEVAL, Equation, FunctionTable, parse
from eqtree.models import (ARCHS, TREE_ARCHS, CheckpointError, ModelParams, UnknownSymbol,
                           checkpoint_bytes, embed_expr, load_params, params_from_bytes,
                           save_params, verify_funceval_model, verify_symbolic)


def _model(arch="treelstm", d=6, seed=0, head_bias=True):
    m = ModelParams(arch, d, seed=seed, head_bias=head_bias)
    # move off the symmetric initialization so every weight matters
    m.theta[...] += np.random.default_rng(seed + 100).normal(0, 0.3, m.theta.size)
    return m


@pytest.mark.parametrize("arch", TREE_ARCHS)
def test_terminal_embedding_is_deterministic(arch):
    m = _model(arch)
    a, b = embed_expr(parse("x"), m), embed_expr(parse("x"), m)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, embed_expr(parse("y"), m))


@pytest.mark.parametrize("arch", TREE_ARCHS)
def test_weight_isolation(arch):
    m = _model(arch)
    before = embed_expr(parse("(sin x)"), m)
    m.store["cell.cos.W"].value[...] += 1.0
    m.store["cell.cos.b"].value[...] -= 0.5
    assert np.array_equal(before, embed_expr(parse("(sin x)"), m))
    m.store["cell.sin.W"].value[...] += 0.1
    assert not np.array_equal(before, embed_expr(parse("(sin x)"), m))


@pytest.mark.parametrize("arch", TREE_ARCHS)
def test_identical_subtrees_embed_identically(arch):
    m = _model(arch)
    tape = Tape(grad=False)
    sub = parse("(+ (sin x) 2.5)")
    H = m.embed_exprs(tape, [sub, parse("(* (+ (sin x) 2.5) y)"), sub]).value
    assert np.array_equal(H[0], H[2])
    assert np.array_equal(H[0], embed_expr(sub, m)[:H.shape[1]])


@pytest.mark.parametrize("arch", TREE_ARCHS)
def test_batched_embedding_matches_single(arch):
    m = _model(arch)
    exprs = [parse(t) for t in ("(sin x)", "(^ (cos th) 2)", "(+ x (* y -1.25))", "pi", "1.07")]
    tape = Tape(grad=False)
    H = m.embed_exprs(tape, exprs).value
    for i, e in enumerate(exprs):
        np.testing.assert_allclose(H[i], embed_expr(e, m)[:H.shape[1]], rtol=0, atol=1e-14)


@pytest.mark.parametrize("arch", ARCHS)
def test_verification_probabilities_in_unit_interval(arch):
    m = _model(arch)
    eqs = [Equation.parse(t) for t in ("(sin x) = (cos x)", "(+ x y) = (+ y x)", "1 = 0")]
    p = verify_symbolic(eqs, m)
    assert p.shape == (3,) and np.all((p > 0) & (p < 1))


@pytest.mark.parametrize("arch", TREE_ARCHS)
def test_identical_sides_give_probability_at_least_half(arch):
    m = _model(arch, head_bias=False)
    for text in ("(sin x) = (sin x)", "(+ (^ x 2) 1) = (+ (^ x 2) 1)", "pi = pi"):
        eq = Equation.parse(text)
        h = embed_expr(eq.lhs, m)[:m.d]
        p = verify_symbolic([eq], m)[0]
        assert p >= 0.5
        assert p == pytest.approx(1 / (1 + np.exp(-h @ h)), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["(sin x)", "(+ x 1)", "(^ (cos y) 2)", "pi", "(* th (tan x))"]),
       st.sampled_from(["(cos x)", "(+ 1 x)", "x", "(exp (* 2 y))"]),
       st.sampled_from(TREE_ARCHS), st.booleans())
def test_verification_head_is_symmetric(a, b, arch, head_bias):
    m = _model(arch, head_bias=head_bias)
    p = verify_symbolic([Equation.parse(f"{a} = {b}"), Equation.parse(f"{b} = {a}")], m)
    assert p[0] == p[1]


@pytest.mark.parametrize("arch", TREE_ARCHS)
def test_number_equal_to_itself_has_zero_error(arch):
    m = _model(arch)
    for v in ("2.5", "-1.37", "0.01"):
        eq = Equation.parse(f"{v} = {v}")
        assert eq.kind == FUNCEVAL
        _, _, sq = verify_funceval_model([eq], m)
        assert sq[0] == 0.0


@pytest.mark.parametrize("arch", TREE_ARCHS)
def test_weight_sharing_sums_gradients(arch):
    shared = _model(arch)
    control = shared.copy()
    for suffix in (".W", ".b"):
        control.store["cell.cos" + suffix].value[...] = control.store["cell.sin" + suffix].value

    def grads(m, text):
        tape = Tape()
        m.store.zero_grad()
        h = m.embed_exprs(tape, [parse(text)])
        tape.backward(tape.sum(tape.tanh(h)))
        return {k: m.store[k].grad.copy() for k in ("cell.sin.W", "cell.sin.b", "cell.cos.W",
                                                    "cell.cos.b")}

    g_shared = grads(shared, "(sin (sin x))")
    g_ctrl = grads(control, "(sin (cos x))")
    for suffix in (".W", ".b"):
        np.testing.assert_allclose(g_shared["cell.sin" + suffix],
                                   g_ctrl["cell.sin" + suffix] + g_ctrl["cell.cos" + suffix],
                                   rtol=1e-12, atol=1e-14)
        assert np.all(g_shared["cell.cos" + suffix] == 0)


def test_chain_token_length():
    m = _model("lstm")
    for text in ("(sin x) = (cos x)", "(+ (^ (sin th) 2) (^ (cos th) 2)) = 1", "(sin -2.5) = -0.6"):
        eq = Equation.parse(text)
        n = sum(1 for _ in eq.lhs.walk()) + sum(1 for _ in eq.rhs.walk())
        assert len(m.token_stream(eq)) == n + 1


def test_chain_models_are_order_sensitive():
    m = _model("rnn")
    a = Equation.parse("(sin x) = (cos (+ x 1))")
    b = Equation.parse("(cos (+ x 1)) = (sin x)")
    assert m.token_stream(a) != m.token_stream(b)
    pa, pb = verify_symbolic([a, b], m)
    assert pa != pb


def test_chain_batch_matches_single():
    m = _model("lstm")
    eqs = [Equation.parse(t) for t in ("x = y", "(sin (cos 0.5)) = (tan -1.5)", "(+ x 1) = 2")]
    batch = verify_symbolic(eqs, m)
    single = np.array([verify_symbolic([e], m)[0] for e in eqs])
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-14)


def test_unknown_symbol():
    m = _model("treenn")
    table = FunctionTable.with_extras()
    eq = Equation(parse("(log x)", table=table), parse("x"), None, "symbolic")
    with pytest.raises(UnknownSymbol):
        verify_symbolic([eq], m)


@pytest.mark.parametrize("arch", ARCHS)
def test_checkpoint_round_trip_is_bit_exact(arch, tmp_path):
    m = _model(arch)
    meta = {"note": "x", "tau": 0.05}
    save_params(m, tmp_path / "a.ckpt", meta)
    back, meta2 = load_params(tmp_path / "a.ckpt")
    assert meta2 == meta and back.same_layout(m)
    assert np.array_equal(back.theta, m.theta)
    save_params(back, tmp_path / "b.ckpt", meta2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_other_table(tmp_path):
    m = _model("treelstm")
    save_params(m, tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "a.ckpt", table=FunctionTable.with_extras())


def test_checkpoint_rejects_garbage_and_truncation():
    data = checkpoint_bytes(_model("rnn"))
    with pytest.raises(CheckpointError):
        params_from_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        params_from_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        params_from_bytes(data.replace(b'"version": 1', b'"version": 9'))


def test_pickle_keeps_views_tied_to_theta():
    m = _model("treelstm")
    back = pickle.loads(pickle.dumps(m))
    assert np.array_equal(back.theta, m.theta)
    back.theta[...] = 0.0
    assert np.all(back.store["cell.sin.W"].value == 0)


def test_layout_has_one_cell_per_function():
    m = ModelParams("treelstm", 4)
    names = {k.split(".")[1] for k in m.store.params if k.startswith("cell.")}
    assert names == set(m.table.names)
    assert m.store["cell.+.W"].shape == (4 * 5, 8)
    assert m.store["cell.sin.W"].shape == (4 * 4, 4)


def test_bad_arguments():
    with pytest.raises(ValueError):
        ModelParams("gru", 4)
    with pytest.raises(ValueError):
        ModelParams("treenn", 0)
