import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from haco.conformal import (
    SafetyImpact,
    apply_gate,
    calibrate_threshold,
    conformal_rank,
    coverage_curve,
    gate_scores,
    safety_impact,
)
from haco.errors import EmptyCalibration, EmptySafeSet, InvalidAlpha
from haco.risk_model import RiskModel

from conftest import make_dataset


def oracle_rank(m, alpha):
    # exact rational arithmetic: alpha given as a fraction of 1000
    num = (m + 1) * (1000 - round(alpha * 1000))
    return min(m, -(-num // 1000))


def test_ten_scores():
    cal = calibrate_threshold(np.arange(1, 11) / 100, 0.10)
    assert cal.rank_used == 10
    assert cal.tau == 0.10
    assert not cal.guarantee_degraded


def test_nineteen_scores():
    scores = np.random.default_rng(0).random(19)
    cal = calibrate_threshold(scores, 0.10)
    assert cal.rank_used == 18
    assert cal.tau == np.sort(scores)[17]


@given(st.integers(1, 5000), st.integers(1, 999))
def test_rank_matches_exact_arithmetic(m, a):
    assert conformal_rank(m, a / 1000) == oracle_rank(m, a / 1000)


def test_degraded_flag():
    cal = calibrate_threshold([0.1, 0.2, 0.3], 0.05)
    assert cal.rank_used == 3
    assert cal.guarantee_degraded


def test_errors():
    with pytest.raises(EmptyCalibration):
        calibrate_threshold([], 0.1)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(InvalidAlpha):
            calibrate_threshold([0.1], bad)


score_lists = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=200)


@given(score_lists, st.randoms(use_true_random=False))
def test_permutation_invariance(scores, rnd):
    shuffled = list(scores)
    rnd.shuffle(shuffled)
    assert calibrate_threshold(scores, 0.1).tau == calibrate_threshold(shuffled, 0.1).tau


@given(score_lists, st.floats(0.01, 0.99))
def test_calibration_invariants(scores, alpha):
    cal = calibrate_threshold(scores, alpha)
    assert cal.tau == cal.scores_sorted[cal.rank_used - 1]
    assert np.mean(np.asarray(scores) <= cal.tau) >= cal.rank_used / cal.calib_size


@given(score_lists)
@settings(max_examples=50)
def test_threshold_tightens_as_alpha_grows(scores):
    rows = coverage_curve(scores, (0.01, 0.05, 0.10, 0.20, 0.30), scores)
    taus = [r[1] for r in rows]
    fracs = [r[2] for r in rows]
    assert all(b <= a for a, b in zip(taus, taus[1:]))
    assert all(b <= a for a, b in zip(fracs, fracs[1:]))


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=200, unique=True))
@settings(max_examples=50)
def test_self_evaluation_count(scores):
    # tie-free scores: exactly rank_used - 1 of them lie strictly below tau
    for alpha, _, frac in coverage_curve(scores, (0.05, 0.2), scores):
        cal = calibrate_threshold(scores, alpha)
        assert frac >= (cal.rank_used - 1) / cal.calib_size - 1e-12


def test_duplicates_keep_coverage():
    scores = np.repeat([0.1, 0.2, 0.3, 0.4], 25)
    cal = calibrate_threshold(scores, 0.1)
    assert cal.tau == 0.4
    assert np.mean(scores <= cal.tau) >= 0.9


def test_gate_boundary_and_range():
    ds = make_dataset({"a:0": [(0, 0, 0.0), (0, 1, 0.0)], "b:0": [(0, 0, -1.0)]})
    zero = RiskModel(np.zeros(2), 0.0, 0.0, ("t_normalized", "prev_reward"), 1.0, False)
    assert not apply_gate(ds, zero, calibrate_threshold([0.5], 0.5)).any()
    assert gate_scores(np.array([0.0, 0.5, 1 - 1e-12]), 1.0).all()


def test_single_alpha_curve_matches_gate():
    rng = np.random.default_rng(1)
    calib, ev = rng.random(100), rng.random(50)
    ((alpha, tau, frac),) = coverage_curve(calib, [0.2], ev)
    cal = calibrate_threshold(calib, 0.2)
    assert tau == cal.tau
    assert frac == gate_scores(ev, cal.tau).mean()


def test_curve_requires_increasing_alphas():
    with pytest.raises(InvalidAlpha):
        coverage_curve([0.1, 0.2], (0.2, 0.1), [0.1])


# safety impact

def test_published_arithmetic():
    imp = SafetyImpact.from_rates(0.0182, 0.0115)
    assert imp.absolute_reduction == pytest.approx(0.0067, abs=1e-12)
    assert imp.relative_reduction == pytest.approx(0.368, abs=1e-3)


def test_identity_mask():
    harm = np.array([True, False, False, True])
    imp = safety_impact(harm, np.ones(4, bool))
    assert imp.harm_rate_safe == imp.harm_rate_all == 0.5
    assert imp.absolute_reduction == 0.0 and imp.relative_reduction == 0.0


def test_no_harm():
    imp = safety_impact(np.zeros(5, bool), np.array([1, 1, 0, 1, 0], bool))
    assert imp.absolute_reduction == 0.0
    assert imp.relative_reduction is None and imp.zero_harm_rate
    assert imp.report()["relative_reduction"] is None


def test_empty_safe_set():
    with pytest.raises(EmptySafeSet):
        safety_impact(np.zeros(3, bool), np.zeros(3, bool))


def test_coverage_small_monte_carlo():
    # uniform scores: P(fresh <= tau) = rank/(M+1) exactly
    rng = np.random.default_rng(3)
    m, alpha = 99, 0.1
    cov = [np.mean(rng.random(200) <= calibrate_threshold(rng.random(m), alpha).tau) for _ in range(400)]
    expected = conformal_rank(m, alpha) / (m + 1)
    assert abs(np.mean(cov) - expected) < 0.01
    assert math.isclose(expected, 0.9)
