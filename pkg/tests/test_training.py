import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from eqtree.datagen import GenConfig, generate_dataset, load_axioms
from eqtree.grammar import FUNCEVAL, SYMBOLIC, Equation
from eqtree.models import ModelParams
from eqtree.training import (METRIC_COLUMNS, Adam, TrainConfig, Trainer, autoencoder_grid_error,
                             calibrate_threshold, confusion_metrics, evaluate_model,
                             evaluate_predictions, pretrain_autoencoder, train_model,
                             write_metrics_csv)

FAST = TrainConfig(epochs=5, hidden_dim=8, dropout=0.0, lr=1e-2, pretrain_steps=60, seed=3)


@pytest.fixture(scope="module")
def toy():
    cfg = GenConfig(max_depth=3, symbolic_count=200, funceval_count=60, seed=9)
    return generate_dataset(load_axioms(), cfg).equations


def test_adam_two_parameter_trace():
    # m, v start at 0; bias-corrected first step moves each weight by lr * sign(g)
    opt = Adam(2, lr=0.1)
    theta = np.array([1.0, -2.0])
    opt.step(theta, np.array([0.5, -1.0]))
    np.testing.assert_allclose(theta, [0.9, -1.9], atol=1e-8)
    opt.step(theta, np.array([0.5, 2.0]))
    # second weight: mhat = 0.11/0.19, vhat = 0.004999/0.001999
    np.testing.assert_allclose(theta, [0.8, -1.9 - 0.1 * (0.11 / 0.19) / np.sqrt(0.004999 / 0.001999)],
                               atol=1e-8)
    assert theta[1] == pytest.approx(-1.93661035, abs=1e-8)


def test_adam_l2_adds_to_gradient():
    a, b = Adam(1, lr=0.1, l2=0.5), Adam(1, lr=0.1)
    ta, tb = np.array([2.0]), np.array([2.0])
    a.step(ta, np.array([0.0]))
    b.step(tb, np.array([1.0]))
    assert ta[0] == tb[0]


def test_zero_learning_rate_leaves_params(toy):
    eq = [e for e in toy if e.kind == SYMBOLIC][:1]
    cfg = replace(FAST, lr=0.0, epochs=1, val_fraction=0.0, l2=0.0)
    t = Trainer(eq, cfg, "treelstm")
    before = t.params.theta.copy()
    t.run_epoch()
    assert np.array_equal(before, t.params.theta)
    assert t.opt.t == 1 and np.any(t.opt.m != 0)


@pytest.mark.parametrize("arch", ["treelstm", "rnn"])
def test_loss_decreases_on_toy_set(toy, arch):
    sym = [e for e in toy if e.kind == SYMBOLIC][:200]
    cfg = replace(FAST, val_fraction=0.0)
    t = Trainer(sym, cfg, arch)
    losses = [t.run_epoch() for _ in range(5)]
    assert losses[-1] < losses[0]


def test_training_is_deterministic(toy):
    cfg = replace(FAST, epochs=2, use_funceval=True, dropout=0.2)
    a = train_model(toy, cfg, "treenn")
    b = train_model(toy, cfg, "treenn")
    assert np.array_equal(a.params.theta, b.params.theta)
    assert write_metrics_csv(a.log) == write_metrics_csv(b.log)
    assert a.tau == b.tau


def test_resume_matches_uninterrupted_run(toy, tmp_path):
    cfg = replace(FAST, epochs=4, use_funceval=True, dropout=0.2)
    full = train_model(toy, cfg, "treelstm")
    t = Trainer(toy, cfg, "treelstm")
    t.run_epoch()
    t.run_epoch()
    t.save(tmp_path / "mid.ckpt")
    r = Trainer.resume(tmp_path / "mid.ckpt", toy, cfg)
    while not r.done:
        r.run_epoch()
    res = r.finish()
    assert np.array_equal(res.params.theta, full.params.theta)
    assert res.tau == full.tau
    assert write_metrics_csv(res.log) == write_metrics_csv(full.log)
    with pytest.raises(ValueError):
        Trainer.resume(tmp_path / "mid.ckpt", toy, replace(cfg, lr=0.5))


def test_funceval_training_sets_tau(toy):
    res = train_model(toy, replace(FAST, epochs=2, use_funceval=True), "treelstm")
    assert res.tau is not None and res.tau > 0
    assert res.autoencoder_error is not None
    m = evaluate_model(toy, res.params, res.tau)
    assert m.n_funceval > 0 and np.isfinite(m.mse) and 0 <= m.funceval_accuracy <= 1


def test_patience_restores_best_epoch(toy):
    cfg = replace(FAST, epochs=6, patience=2)
    res = train_model(toy, cfg, "treenn")
    assert 1 <= res.best_epoch <= len(res.log)
    assert len(res.log) <= 6


def test_all_correct_predictions_give_accuracy_one():
    eqs = [Equation.parse("(+ x y) = (+ y x)", label=True)] * 5 + \
          [Equation.parse("x = y", label=False)] * 5
    m = evaluate_predictions(eqs, [True] * 5 + [False] * 5)
    assert m.accuracy == 1.0 and m.precision == 1.0 and m.recall == 1.0


def test_majority_class_has_zero_precision_and_recall():
    labels = [True] * 49 + [False] * 51
    m = confusion_metrics(labels, [False] * 100)
    assert m.accuracy == 0.51 and m.precision == 0.0 and m.recall == 0.0


def test_precision_recall_identities():
    rng = np.random.default_rng(0)
    y, p = rng.random(300) < 0.5, rng.random(300) < 0.4
    m = confusion_metrics(y, p)
    assert m.tp + m.fp + m.tn + m.fn == 300
    assert m.recall == m.tp / (m.tp + m.fn)
    assert m.precision == m.tp / (m.tp + m.fp)
    assert m.accuracy == (m.tp + m.tn) / 300


def test_identity_funceval_contributes_zero_mse():
    params = ModelParams("treelstm", 6)
    eqs = [Equation.parse("2.5 = 2.5", label=True), Equation.parse("-1.2 = -1.2", label=True)]
    assert evaluate_model(eqs, params).mse == 0.0


def test_per_depth_accuracy():
    eqs = [Equation.parse("x = x", label=True), Equation.parse("(sin x) = (sin x)", label=True),
           Equation.parse("(sin x) = x", label=False)]
    m = evaluate_predictions(eqs, [True, True, True])
    assert m.depth_accuracy == {1: 1.0, 2: 0.5}


def test_threshold_between_separable_clusters():
    sq = [0.001, 0.002, 0.003, 0.5, 0.6, 0.9]
    lab = [True, True, True, False, False, False]
    tau = calibrate_threshold(sq, lab)
    assert 0.003 < tau < 0.5
    assert tau == calibrate_threshold(sq, lab)


def test_threshold_is_positive_even_at_the_bottom():
    assert calibrate_threshold([0.2, 0.4], [False, True]) > 0
    assert calibrate_threshold([0.0, 1.0], [True, False]) >= 0


def test_threshold_needs_both_labels():
    with pytest.raises(ValueError):
        calibrate_threshold([0.1, 0.2], [True, True])
    with pytest.raises(ValueError):
        calibrate_threshold([-0.1, 0.2], [True, False])


def test_metrics_csv_header():
    text = write_metrics_csv([{"epoch": 1, "split": "valid", "arch": "rnn", "accuracy": 0.5,
                               "mse": float("nan")}])
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert rows[1][:4] == ["1", "valid", "rnn", "0.500000"] and rows[1][6] == ""


def test_autoencoder_pretraining_reaches_grid_accuracy():
    params = ModelParams("treelstm", 10, seed=1)
    err = pretrain_autoencoder(params)
    assert err == pytest.approx(autoencoder_grid_error(params))
    assert err <= 0.01


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(ae_weight=-0.1)


def test_empty_training_set():
    with pytest.raises(ValueError):
        Trainer([Equation.parse("(sin 2.5) = 0.6", label=True)], FAST, "treelstm")


def test_funceval_kind_is_filtered_without_flag(toy):
    t = Trainer(toy, replace(FAST, val_fraction=0.0), "treenn")
    assert all(e.kind == SYMBOLIC for e in t.train)
    t2 = Trainer(toy, replace(FAST, val_fraction=0.0, use_funceval=True), "treenn")
    assert any(e.kind == FUNCEVAL for e in t2.train)
