"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""

import dataclasses
import math
import time
from itertools import product

import numpy as np

from haco.audit import (
    bootstrap_pvalue,
    calibration_bins,
    episode_levels,
    episode_returns,
    subgroup_audit,
    wilson_interval,
)
from haco.conformal import SafetyImpact, calibrate_threshold, coverage_curve, gate_scores, safety_impact
from haco.fqe import estimate_v0, fit_fqe
from haco.pipeline import PipelineConfig, run_pipeline
from haco.policy import (
    StateTablePolicy,
    UniformPolicy,
    fit_behavior_cloning,
    fit_multinomial,
    multinomial_gradient,
    multinomial_objective,
)
from haco.risk_model import (
    auc,
    fit_logistic,
    fit_risk_model,
    logistic_gradient,
    logistic_objective,
    score_dataset,
)
from haco.synth import (
    SynthConfig,
    generate_dataset,
    generate_tabular_dataset,
    random_tabular_mdp,
    true_policy_value,
)
from haco.trajectory_store import SplitSpec, temporal_split

from conftest import record_criterion


def check(number, title, ok, detail):
    record_criterion(number, title, bool(ok), detail)
    assert ok, detail


def central_difference(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def brute_auc(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    return total / (len(pos) * len(neg))


def test_c01_conformal_coverage():
    start = time.perf_counter()
    train, _ = generate_dataset(SynthConfig(n_patients=3000, horizon=10, seed=10_000))
    model = fit_risk_model(train, use_state=True)
    alphas = (0.10, 0.05, 0.30)
    cover = {a: [] for a in alphas}
    for seed in range(100):
        # 500 episodes of 10 steps give M = 5000 calibration scores; 20 more give 200 test scores
        ds, _ = generate_dataset(SynthConfig(n_patients=520, horizon=10, seed=seed))
        scores = score_dataset(model, ds)
        calib, test = scores[:5000], scores[5000:]
        assert len(test) == 200
        for a in alphas:
            cover[a].append(np.mean(test <= calibrate_threshold(calib, a).tau))
    elapsed = time.perf_counter() - start
    means = {a: float(np.mean(v)) for a, v in cover.items()}
    ok = all(1 - a - 0.01 <= means[a] <= 1 - a + 0.02 + 0.01 for a in alphas) and elapsed < 30
    detail = ", ".join(f"alpha={a}: {means[a]:.4f}" for a in alphas) + f"; {elapsed:.1f}s"
    check(1, "conformal coverage", ok, detail)


def test_c02_coverage_monotonicity():
    start = time.perf_counter()
    grid = (0.01, 0.05, 0.1, 0.2, 0.3)
    bad = []
    for seed in range(20):
        ds, _ = generate_dataset(SynthConfig(n_patients=1000, horizon=10, seed=seed))
        train, calib, test = temporal_split(ds, SplitSpec())
        model = fit_risk_model(train, use_state=True)
        rows = coverage_curve(score_dataset(model, calib), grid, score_dataset(model, test))
        taus = [r[1] for r in rows]
        fracs = [r[2] for r in rows]
        if not (all(b >= a for a, b in zip(taus, taus[1:])) and all(b >= a for a, b in zip(fracs, fracs[1:]))):
            bad.append((seed, taus[0], taus[-1], fracs[0], fracs[-1]))
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 10
    detail = f"{20 - len(bad)}/20 seeds non-decreasing in alpha; {elapsed:.1f}s"
    if bad:
        seed, t0, t1, f0, f1 = bad[0]
        detail += f" (seed {seed}: tau {t0:.4f} -> {t1:.4f}, safe fraction {f0:.3f} -> {f1:.3f})"
    check(2, "coverage monotonicity", ok, detail)


def test_c03_safety_impact_arithmetic():
    imp = SafetyImpact.from_rates(0.0182, 0.0115)
    ok = math.isclose(imp.absolute_reduction, 0.0067, abs_tol=1e-12) and abs(imp.relative_reduction - 0.368) <= 1e-3
    check(3, "safety-impact arithmetic", ok,
          f"absolute {imp.absolute_reduction:.6f}, relative {imp.relative_reduction:.6f}")


def test_c04_harm_reduction_direction():
    wins, min_safe = 0, 1.0
    for seed in range(20):
        ds, _ = generate_dataset(SynthConfig(n_patients=5000, horizon=10, seed=seed))
        train, calib, _ = temporal_split(ds, SplitSpec())
        model = fit_risk_model(train)
        cal = calibrate_threshold(score_dataset(model, calib), 0.10)
        imp = safety_impact(ds.harm, gate_scores(score_dataset(model, ds), cal.tau))
        wins += imp.harm_rate_safe < imp.harm_rate_all
        min_safe = min(min_safe, imp.safe_fraction)
    ok = wins >= 18 and min_safe >= 0.75
    check(4, "harm-rate reduction direction", ok, f"{wins}/20 seeds reduce harm; min safe fraction {min_safe:.3f}")


def test_c05_risk_discrimination():
    ds, _ = generate_dataset(SynthConfig(n_patients=20_000, horizon=10, risk_signal_strength=4.0, seed=1))
    train, _, test = temporal_split(ds, SplitSpec())
    model = fit_risk_model(train)
    held_out = auc(score_dataset(model, test), test.harm)
    rng = np.random.default_rng(5)
    exact = 0
    for _ in range(50):
        n = int(rng.integers(2, 201))
        scores = rng.integers(0, 20, n) / 4.0  # coarse grid so ties occur
        labels = rng.random(n) < 0.3
        labels[0], labels[1] = True, False
        exact += auc(scores, labels) == brute_auc(scores, labels)
    ok = held_out >= 0.75 and exact == 50
    check(5, "risk model discrimination", ok, f"held-out AUC {held_out:.4f}; {exact}/50 exact pairwise matches")


def test_c06_gradients():
    rng = np.random.default_rng(6)
    worst, norms = 0.0, []
    X = rng.normal(size=(50, 3))
    y = rng.random(50) < 1 / (1 + np.exp(-X @ [1.0, -1.0, 0.5]))
    lam = 1e-2
    for _ in range(3):
        theta = rng.normal(size=4)
        num = central_difference(lambda th: logistic_objective(th, X, y, lam), theta)
        worst = max(worst, np.linalg.norm(logistic_gradient(theta, X, y, lam) - num) / np.linalg.norm(num))
    m = fit_logistic(X, y, l2_lambda=lam)
    norms.append(np.linalg.norm(logistic_gradient(np.r_[m.weights, m.intercept], X, y, lam)))

    A = 4
    acts = rng.integers(0, A, 50)
    for _ in range(3):
        theta = rng.normal(size=(A - 1) * 4)
        num = central_difference(lambda th: multinomial_objective(th, X, acts, A, lam), theta)
        worst = max(worst, np.linalg.norm(multinomial_gradient(theta, X, acts, A, lam) - num) / np.linalg.norm(num))
    W, b = fit_multinomial(X, acts, A, l2_lambda=lam)
    norms.append(np.linalg.norm(multinomial_gradient(np.column_stack([W[1:], b[1:]]).ravel(), X, acts, A, lam)))
    ok = worst < 1e-5 and max(norms) <= 1e-6
    check(6, "logistic and multinomial gradients", ok,
          f"max relative FD error {worst:.2e}; converged gradient norms {norms[0]:.1e}, {norms[1]:.1e}")


def test_c07_fqe_tabular():
    start = time.perf_counter()
    mdp = random_tabular_mdp(n_states=3, n_actions=3, seed=0, terminate=0.2, reward_noise=0.1)
    # rewards kept away from zero so a relative tolerance is meaningful
    mdp = dataclasses.replace(mdp, reward=mdp.reward + 2.0)
    ds = generate_tabular_dataset(mdp, np.full((3, 3), 1 / 3), 10_000, seed=1)
    uniform = UniformPolicy(3)
    q_uniform = mdp.q_values(mdp.policy_matrix(uniform), 0.9)
    greedy = StateTablePolicy(np.eye(3)[q_uniform.argmax(axis=1)])
    errs = {}
    for name, pol in (("uniform", uniform), ("greedy", greedy)):
        q = fit_fqe(ds, pol, gamma=0.9, ridge_lambda=1e-6, include_time=False)
        est = estimate_v0(q, ds, pol).v0
        errs[name] = abs(est / true_policy_value(mdp, pol, 0.9).value - 1)
    q0 = fit_fqe(ds, uniform, gamma=0.0, ridge_lambda=1e-6, include_time=False)
    elapsed = time.perf_counter() - start
    ok = max(errs.values()) <= 0.05 and q0.iterations_run == 1 and q0.converged and elapsed < 60
    check(7, "FQE correctness", ok,
          f"relative error uniform {errs['uniform']:.1e}, greedy {errs['greedy']:.1e}; "
          f"gamma=0 iterations {q0.iterations_run}; {elapsed:.1f}s")


def test_c08_bc_chance_level():
    ds, _ = generate_dataset(SynthConfig(n_patients=4000, horizon=10, behavior="uniform", seed=8))
    train = ds.select_episodes(np.arange(3000))
    test = ds.select_episodes(np.arange(3000, 4000))
    _, acc = fit_behavior_cloning(train, test, l2_lambda=1e-3)
    ok = len(test) == 10_000 and abs(acc - 1 / 9) <= 0.02
    check(8, "BC chance level", ok, f"accuracy {acc:.4f} on {len(test)} test steps (1/9 = {1/9:.4f})")


TWO_RACES = {"race": {"White": 0.55, "Black": 0.45}}


def test_c09_audit_planted_effect():
    ds, _ = generate_dataset(SynthConfig(n_patients=12_000, horizon=10, demographic_mix=TWO_RACES, seed=9))
    returns = episode_returns(ds, 1.0)
    race = episode_levels(ds, "Race")
    returns = returns - 0.05 * (race == "Black")
    rows = {r.level: r for r in subgroup_audit(ds, returns, seed=9, threads=4) if r.group == "Race"}
    black, ref = rows["Black"], rows[rows["Black"].reference_level]
    planted = (black.n >= 5000 and ref.n >= 5000 and ref.level == "White"
               and not black.ci_low <= ref.mean <= black.ci_high and black.p_value < 0.05)

    hits = 0
    for seed in range(50):
        null, _ = generate_dataset(SynthConfig(n_patients=4000, horizon=10, demographic_mix=TWO_RACES,
                                               seed=100 + seed), threads=4)
        r = episode_returns(null, 1.0)
        lv = episode_levels(null, "Race")
        hits += bootstrap_pvalue(r[lv == "Black"], r[lv == "White"], B=1000, seed=seed, threads=4) < 0.05
    ok = planted and hits <= 5
    check(9, "audit planted-effect detection", ok,
          f"Black n={black.n} CI [{black.ci_low:.4f}, {black.ci_high:.4f}] vs reference mean {ref.mean:.4f}, "
          f"p={black.p_value:.4f}; null rejections {hits}/50")


def test_c10_wilson():
    k, n, z = 5, 10, 1.96
    p = k / n
    root = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    oracle = ((p + z * z / (2 * n) - root) / (1 + z * z / n), (p + z * z / (2 * n) + root) / (1 + z * z / n))
    lo, hi = wilson_interval(k, n, z)
    rng = np.random.default_rng(10)
    pred = rng.random(100_000)
    obs = rng.random(100_000) < pred
    bins = calibration_bins(pred, obs, 10, z)
    covered = sum(b.wilson_low <= b.mean_predicted <= b.wilson_high for b in bins)
    ok = (abs(lo - 0.237) <= 1e-3 and abs(hi - 0.763) <= 1e-3
          and math.isclose(lo, oracle[0], abs_tol=1e-12) and math.isclose(hi, oracle[1], abs_tol=1e-12)
          and covered >= 9)
    check(10, "Wilson intervals", ok, f"[{lo:.4f}, {hi:.4f}]; {covered}/10 bins cover the identity")


def test_c11_end_to_end_determinism(tmp_path):
    cfg = PipelineConfig.from_dict({"synth": {}, "seed": 11})
    timings, hashes = {}, {}
    for threads in (1, 8):
        start = time.perf_counter()
        manifest = run_pipeline(cfg, threads=threads, output_dir=tmp_path / f"t{threads}")
        timings[threads] = time.perf_counter() - start
        hashes[threads] = {sec: {k: v["sha256"] for k, v in manifest[sec].items()}
                           for sec in ("artifacts", "models", "intermediate", "plot_data")}
    n_files = sum(len(v) for v in hashes[1].values())
    ok = n_files > 0 and hashes[1] == hashes[8] and max(timings.values()) < 300
    check(11, "end-to-end determinism", ok,
          f"{n_files} hashed files identical at 1 and 8 threads: {hashes[1] == hashes[8]}; "
          f"runtimes {timings[1]:.1f}s / {timings[8]:.1f}s for {cfg.synth.n_patients * cfg.synth.horizon} steps")
