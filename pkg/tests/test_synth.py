import numpy as np
import pytest

from haco.errors import InvalidConfig
from haco.policy import StateTablePolicy, UniformPolicy
from haco.risk_model import auc
from haco.synth import (
    GroundTruthMDP,
    SynthConfig,
    TabularMDP,
    generate_dataset,
    random_tabular_mdp,
    true_policy_value,
)


def test_counts():
    ds, _ = generate_dataset(SynthConfig(n_patients=2, horizon=3))
    assert len(ds) == 6
    assert ds.n_episodes == 2
    assert ds.action_count == 9


def test_zero_harm_rate():
    ds, _ = generate_dataset(SynthConfig(n_patients=500, horizon=5, harm_base_rate=0.0))
    assert not ds.harm.any()
    assert (ds.reward >= 0).all()


def test_deterministic_and_thread_invariant():
    cfg = SynthConfig(n_patients=300, horizon=4, seed=11)
    a, _ = generate_dataset(cfg, threads=1)
    b, _ = generate_dataset(cfg, threads=4)
    for name in ("states", "action", "reward", "harm", "t"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.demographics == b.demographics


def test_harm_rate_near_target():
    ds, _ = generate_dataset(SynthConfig(n_patients=10_000, horizon=10, seed=5))
    assert abs(ds.harm.mean() / 0.0182 - 1) < 0.2


def test_harm_iff_negative_reward():
    ds, _ = generate_dataset(SynthConfig(n_patients=2000, horizon=10, seed=1))
    np.testing.assert_array_equal(ds.harm, ds.reward < 0)


def test_oracle_auc_increases_with_signal():
    means = []
    for strength in (0.5, 1.5, 3.0):
        vals = []
        for seed in range(5):
            ds, mdp = generate_dataset(SynthConfig(n_patients=2000, horizon=10,
                                                   risk_signal_strength=strength, seed=seed))
            vals.append(auc(mdp.harm_probability(ds), ds.harm))
        means.append(np.mean(vals))
    assert means[0] < means[1] < means[2]


def test_invalid_config():
    with pytest.raises(InvalidConfig):
        SynthConfig(action_count=1)
    with pytest.raises(InvalidConfig):
        SynthConfig(harm_base_rate=1.5)


def test_ground_truth_json_round_trip(tmp_path):
    _, mdp = generate_dataset(SynthConfig(n_patients=20, horizon=2, seed=3))
    mdp.save_json(tmp_path / "gt.json")
    back = GroundTruthMDP.load_json(tmp_path / "gt.json")
    assert back.to_dict() == mdp.to_dict()


# exact oracle

def _chain(rewards):
    """Deterministic chain visiting states 0..n-1, reward ``rewards[s]``, ends after the last."""
    n = len(rewards)
    trans = np.zeros((n, 1, n))
    term = np.zeros((n, 1))
    for s in range(n):
        trans[s, 0, min(s + 1, n - 1)] = 1.0
    term[n - 1, 0] = 1.0
    initial = np.eye(n)[0]
    return TabularMDP(trans, np.array(rewards, dtype=float)[:, None], term, initial)


def test_one_step_value():
    for gamma in (0.0, 0.5, 1.0):
        assert true_policy_value(_chain([1.0]), UniformPolicy(1), gamma).value == pytest.approx(1.0)


def test_two_step_chain():
    assert true_policy_value(_chain([1.0, 1.0]), UniformPolicy(1), 1.0).value == pytest.approx(2.0)


def test_discount_zero_is_immediate_reward():
    mdp = random_tabular_mdp(seed=3)
    policy = StateTablePolicy(np.array([[0.2, 0.3, 0.5], [1, 0, 0], [0, 0.5, 0.5]]))
    pi = mdp.policy_matrix(policy)
    expected = mdp.initial @ (pi * mdp.reward).sum(axis=1)
    assert true_policy_value(mdp, policy, 0.0).value == pytest.approx(expected)


def test_exact_value_matches_monte_carlo_rollouts():
    mdp = random_tabular_mdp(seed=8, reward_noise=0.0)
    pi = np.full((3, 3), 1 / 3)
    rng = np.random.default_rng(0)
    returns = []
    for _ in range(20_000):
        s, g, ret = rng.choice(3, p=mdp.initial), 1.0, 0.0
        while True:
            a = rng.choice(3, p=pi[s])
            ret += g * mdp.reward[s, a]
            if rng.random() < mdp.terminate[s, a]:
                break
            s = rng.choice(3, p=mdp.transition[s, a])
            g *= 0.9
        returns.append(ret)
    exact = true_policy_value(mdp, UniformPolicy(3), 0.9).value
    assert abs(np.mean(returns) - exact) < 4 * np.std(returns) / np.sqrt(len(returns))


def test_monte_carlo_value_reports_stderr():
    _, mdp = generate_dataset(SynthConfig(n_patients=10, horizon=3, seed=0))
    res = true_policy_value(mdp, UniformPolicy(9), 0.9, n_rollouts=5000)
    assert res.stderr > 0
    assert res.n_rollouts == 5000
