import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqtree.datagen import Dataset, GenConfig, generate_dataset, load_axioms
from eqtree.evalcore import label_equation
from eqtree.grammar import SYMBOLIC, Equation, Expr, parse, symbolic_terminals
from eqtree.models import ModelParams
from eqtree.tasks import (CompletionInstance, ExperimentConfig, RankedPredictions, Variant,
                          check_monotone, eligible_blanks, evaluate_completion, funceval_candidates,
                          make_completion_instances, rank_candidates, run_experiment,
                          symbolic_candidates, top_k_accuracy, top_k_accuracy_curve, top_k_min_mse,
                          top_k_min_sq)
from eqtree.training import TrainConfig


@pytest.fixture(scope="module")
def data():
    cfg = GenConfig(max_depth=3, symbolic_count=150, funceval_count=50, seed=21)
    return generate_dataset(load_axioms(), cfg)


def _instance(text, side, path):
    eq = Equation.parse(text, label=True)
    cands = symbolic_candidates() if eq.kind == SYMBOLIC else funceval_candidates()
    return CompletionInstance(eq, side, path, eq.side(side).at(path), eq.kind, cands)


def test_symbolic_candidate_count():
    t = len(symbolic_terminals())
    assert t == 15
    assert len(symbolic_candidates()) == t + 25 * t + 3 * t * t == 1065


def test_funceval_candidates_cover_the_grid():
    texts = {str(c) for c in funceval_candidates()}
    assert len([c for c in funceval_candidates() if c.kind == "num"]) > 600
    assert {"2.18", "-3.14", "3.14", "0", "pi"} <= texts


def test_blank_templates():
    a = _instance("(^ 4 (tanh 0)) = (^ 1 x)", 1, (0,))
    assert a.template == "(^ 4 (tanh 0)) = (^ ? x)"
    b = _instance("(cos (* -1 2.18)) = -0.57", 0, (0, 1))
    assert b.template == "(cos (* -1 ?)) = -0.57"
    assert b.truth_value == 2.18


def test_min_mse_uses_closest_ranked_value():
    inst = _instance("(cos (* -1 2.18)) = -0.57", 0, (0, 1))
    ranking = RankedPredictions(tuple(Expr.num(v) for v in (3.0, 2.17, 2.16)), np.zeros(3))
    curve = top_k_min_sq(inst, ranking, 3)
    assert curve[-1] == pytest.approx(1e-4, abs=1e-12)
    assert curve[0] == pytest.approx((3 - 2.18) ** 2)
    assert top_k_min_mse([inst], [ranking], 3) == pytest.approx(1e-4, abs=1e-12)


def test_ground_truth_in_top1_gives_zero_mse():
    inst = _instance("(cos (* -1 2.18)) = -0.57", 0, (0, 1))
    ranking = RankedPredictions((Expr.num(2.18), Expr.num(1.0)), np.zeros(2))
    assert top_k_min_sq(inst, ranking, 2).tolist() == [0.0, 0.0]


def test_adversarial_ranking():
    inst = _instance("(+ x 0) = x", 0, (1,))
    wrong, right = parse("1"), parse("0")
    ranking = RankedPredictions((wrong, right), np.array([0.9, 0.1]))
    assert label_equation(inst.fill(wrong)) is False
    assert top_k_accuracy([inst], [ranking], 1) == 0.0
    assert top_k_accuracy([inst], [ranking], 2) == 1.0


def test_full_candidate_list_always_contains_a_correct_fill(data):
    params = ModelParams("treenn", 4)
    test = [e for e in data if e.kind == SYMBOLIC and e.label][:4]
    instances, _ = make_completion_instances(test, np.random.default_rng(0))
    rankings = [rank_candidates(i, params) for i in instances]
    k = len(symbolic_candidates())
    assert top_k_accuracy(instances, rankings, k) == 1.0


def test_filling_truth_restores_equation(data):
    instances, skipped = make_completion_instances(data.equations, np.random.default_rng(1))
    assert len(instances) + skipped == sum(1 for e in data if e.label)
    for inst in instances:
        back = inst.fill(inst.truth)
        assert back.text == inst.equation.text
        assert label_equation(back) is True
        assert inst.truth.depth() <= 2


def test_blanks_only_at_depth_one_or_two():
    eq = Equation.parse("(+ (^ (sin th) 2) (^ (cos th) 2)) = 1")
    for side, path in eligible_blanks(eq):
        assert eq.side(side).at(path).depth() <= 2


def test_ranking_is_total_order_with_text_tiebreak():
    params = ModelParams("treelstm", 4)
    inst = _instance("(sin (+ x 0)) = (sin x)", 0, (0, 1))
    r = rank_candidates(inst, params)
    assert len(r.candidates) == len(inst.candidates)
    assert len(set(map(str, r.candidates))) == len(r.candidates)
    assert np.all(np.diff(r.confidence) <= 0)
    for i in range(len(r.candidates) - 1):
        if r.confidence[i] == r.confidence[i + 1]:
            assert str(r.candidates[i]) < str(r.candidates[i + 1])


def test_funceval_confidence_is_negative_squared_error():
    params = ModelParams("treelstm", 4)
    inst = _instance("(cos (* -1 2.18)) = -0.57", 0, (0, 1))
    r = rank_candidates(inst, params)
    assert np.all(r.confidence <= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(1, 30)), min_size=1, max_size=40))
def test_top_k_accuracy_curve_is_monotone(ranks):
    curve = top_k_accuracy_curve(ranks, 25)
    assert np.all(np.diff(curve) >= 0)
    check_monotone(acc_curve=curve)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3.14, 3.14), min_size=1, max_size=30))
def test_top_k_min_sq_is_nonincreasing(values):
    inst = _instance("(cos (* -1 2.18)) = -0.57", 0, (0, 1))
    ranking = RankedPredictions(tuple(Expr.num(round(v, 2)) for v in values), np.zeros(len(values)))
    curve = top_k_min_sq(inst, ranking, len(values))
    assert np.all(np.diff(curve) <= 0)


def test_check_monotone_rejects_violations():
    with pytest.raises(AssertionError):
        check_monotone(acc_curve=np.array([0.5, 0.4]))
    with pytest.raises(AssertionError):
        check_monotone(mse_curve=np.array([0.1, 0.2]))


def test_variant_parse():
    assert Variant.parse("treelstm+data") == Variant("treelstm", True)
    assert Variant.parse("rnn").name == "rnn"
    with pytest.raises(ValueError):
        Variant.parse("rnn+extra")


TINY = TrainConfig(epochs=1, hidden_dim=4, pretrain_steps=20, dropout=0.0)
TINY_EXP = ExperimentConfig(variants=(Variant("rnn"), Variant("treelstm", True)), k_max=5,
                            completion_limit=2, extrapolate_depth=3)


@pytest.mark.parametrize("name", ["generalization", "extrapolation", "completion"])
def test_reports_are_deterministic(data, tmp_path, name):
    a = run_experiment(name, data, TINY, TINY_EXP, tmp_path / "a")
    b = run_experiment(name, data, TINY, TINY_EXP, tmp_path / "b")
    assert a == b
    for fname, text in a.items():
        assert (tmp_path / "a" / fname).read_text() == text


def test_generalization_report_layout(data, tmp_path):
    rep = run_experiment("generalization", data, TINY, TINY_EXP, tmp_path)
    lines = rep["generalization.csv"].splitlines()
    assert lines[0] == "approach,seed,sym,feval_mse,precision,recall,depth1,depth2,depth3,depth4"
    names = [ln.split(",")[0] for ln in lines[1:]]
    assert names == ["majority", "rnn", "treelstm+data"]
    rnn = lines[2].split(",")
    assert rnn[3] == ""


def test_extrapolation_trains_without_held_out_depth(data, tmp_path):
    trained = {}
    run_experiment("extrapolation", data, TINY, TINY_EXP, tmp_path, trained=trained)
    rep = (tmp_path / "extrapolation.csv").read_text().splitlines()
    for row in rep[1:]:
        cols = row.split(",")
        assert cols[6] == "" and cols[7] == ""  # test split holds depth 3 only
    assert trained


def test_completion_curves(data):
    params = ModelParams("treelstm", 4)
    test = [e for e in data if e.label][:10]
    c = evaluate_completion(test, params, k_max=5)
    assert c.accuracy.shape == (5,) and c.min_mse.shape == (5,)
    assert c.n_symbolic + c.n_funceval + c.skipped == len(test)


def test_unknown_experiment(data, tmp_path):
    with pytest.raises(ValueError):
        run_experiment("other", data, TINY, TINY_EXP, tmp_path)


def test_empty_inputs():
    assert np.isnan(top_k_accuracy([], [], 3))
    assert np.isnan(top_k_min_mse([], [], 3))
    assert Dataset([]).stats()["total"] == 0
