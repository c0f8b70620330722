import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from haco.errors import DegenerateLabels, FeatureMismatch
from haco.risk_model import (
    RiskFeatures,
    RiskModel,
    auc,
    featurize,
    fit_logistic,
    logistic_gradient,
    logistic_objective,
    predict_harm,
)
from haco.trajectory_store import Step


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    return total / (len(pos) * len(neg))


def fd_gradient(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def _step(t, prev, state=(0.2,)):
    return Step("p", "p:0", t, state, 0, 0.0, False, prev)


# featurize

def test_featurize_examples():
    assert featurize(_step(0, 0.0)).values.tolist() == [0.0, 0.0]
    assert featurize(_step(50, -1.0), t_scale=100).values.tolist() == [0.5, -1.0]
    x = featurize(_step(50, -1.0), use_state=True, t_scale=100)
    assert x.values.tolist() == [0.5, -1.0, 0.2]
    assert len(x.names) == 3


# predict_harm

def _model(w, b, names=("t_normalized", "prev_reward")):
    return RiskModel(np.asarray(w, dtype=float), b, 0.0, names, 1.0, False)


def _feat(vals):
    return RiskFeatures(np.asarray(vals, dtype=float), ("t_normalized", "prev_reward"))


def test_predict_examples():
    assert predict_harm(_model([0, 0], 0.0), _feat([0.3, -1])) == 0.5
    assert predict_harm(_model([0, 0], 30.0), _feat([0.3, -1])) >= 1 - 1e-9
    assert predict_harm(_model([0, 0], math.log(3)), _feat([1, 1])) == pytest.approx(0.75, abs=1e-15)


def test_predict_feature_mismatch():
    with pytest.raises(FeatureMismatch):
        predict_harm(_model([0], 0.0, names=("a",)), _feat([0, 0]))


# fit_logistic

def test_single_class_regularized():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 2))
    model = fit_logistic(X, np.zeros(40, bool), l2_lambda=1.0)
    probs = 1 / (1 + np.exp(-(X @ model.weights + model.intercept)))
    assert (probs < 0.5).all()
    with pytest.raises(DegenerateLabels):
        fit_logistic(X, np.zeros(40, bool), l2_lambda=0.0)


def test_symmetric_intercept_zero():
    X = np.r_[-np.ones(50), np.ones(50)][:, None]
    y = X[:, 0] > 0
    model = fit_logistic(X, y, l2_lambda=0.1)
    assert abs(model.intercept) < 1e-6


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 3))
    y = rng.random(50) < 0.4
    lam = 0.05
    model = fit_logistic(X, y, l2_lambda=lam)
    points = [np.r_[model.weights, model.intercept]] + [rng.normal(size=4) for _ in range(3)]
    for theta in points:
        analytic = logistic_gradient(theta, X, y, lam)
        numeric = fd_gradient(lambda th: logistic_objective(th, X, y, lam), theta)
        scale = max(np.linalg.norm(numeric), 1e-3)
        assert np.linalg.norm(analytic - numeric) / scale < 1e-5


def test_converges_from_perturbed_start():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(200, 3))
    y = rng.random(200) < 1 / (1 + np.exp(-(X @ [1.0, -0.5, 0.2])))
    base = fit_logistic(X, y, l2_lambda=1e-3)
    start = np.r_[base.weights, base.intercept] + rng.normal(scale=2.0, size=4)
    moved = fit_logistic(X, y, l2_lambda=1e-3, init=start)
    np.testing.assert_allclose(moved.weights, base.weights, atol=1e-6)
    assert moved.intercept == pytest.approx(base.intercept, abs=1e-6)
    theta = np.r_[base.weights, base.intercept]
    assert logistic_objective(theta, X, y, 1e-3) <= logistic_objective(np.zeros(4), X, y, 1e-3)
    assert np.linalg.norm(logistic_gradient(theta, X, y, 1e-3)) <= 1e-6


def test_model_json_round_trip(tmp_path):
    model = RiskModel(np.array([0.1, -0.2]), 0.3, 1e-4, ("t_normalized", "prev_reward"), 9.0, False)
    model.save(tmp_path / "m.json")
    back = RiskModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.weights, model.weights)
    assert back.intercept == model.intercept and back.t_scale == 9.0


# auc

@pytest.mark.parametrize(
    "scores, labels, expected",
    [([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], 1.0), ([0.4, 0.6], [1, 0], 0.0), ([0.5, 0.5, 0.3], [1, 0, 0], 0.75)],
)
def test_auc_examples(scores, labels, expected):
    assert auc(np.array(scores), np.array(labels, bool)) == expected


def test_auc_degenerate():
    with pytest.raises(DegenerateLabels):
        auc(np.array([0.1, 0.2]), np.array([True, True]))


labelled = st.integers(min_value=2, max_value=60).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 8), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n),
    )
).filter(lambda sl: 0 < sum(sl[1]) < len(sl[1]))


@given(labelled)
@settings(max_examples=100)
def test_auc_matches_pairwise_count(data):
    scores, labels = np.array(data[0], float), np.array(data[1])
    assert auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


@given(labelled)
@settings(max_examples=50)
def test_auc_monotone_transform_and_complement(data):
    scores, labels = np.array(data[0], float), np.array(data[1])
    assert auc(np.exp(3 * scores) - 7, labels) == pytest.approx(auc(scores, labels), abs=1e-12)
    assert auc(scores, labels) + auc(scores, ~labels) == pytest.approx(1.0, abs=1e-12)
