"""Synthetic trajectories with a known ground-truth harm and reward process.

Each patient draws a latent frailty that raises harm risk and lowers
engagement, so ``t``, ``prev_reward`` and the state are all informative
about harm. Rewards are ``-1`` on harm and ``0.1 * engagement`` otherwise.
The harm intercept is solved numerically so the marginal harm rate matches
``SynthConfig.harm_base_rate``.

Every patient is simulated from its own random stream spawned from the root
seed, so output does not depend on how patients are spread over threads.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import InvalidConfig
from .trajectory_store import (
    AGE_LEVELS,
    RACE_LEVELS,
    SEX_LEVELS,
    Dataset,
    Demographics,
)

DEFAULT_DEMOGRAPHIC_MIX: dict[str, dict[str, float]] = {
    "age_bin": {"Under35": 0.57, "35to49": 0.22, "50to64": 0.16, "Over65": 0.04, "Unknown": 0.01},
    "sex": {"Female": 0.57, "Male": 0.42, "Unknown": 0.01},
    "race": {"Black": 0.19, "White": 0.34, "Asian": 0.05, "Hispanic": 0.06, "Other": 0.35, "Unknown": 0.01},
}
_LEVELS = {"age_bin": AGE_LEVELS, "sex": SEX_LEVELS, "race": RACE_LEVELS}

# latent risk mixture weights (before scaling by risk_signal_strength)
FRAILTY_RISK = 1.0
STATE_RISK = 0.6
TIME_RISK = 0.5
ACTION_RISK = 0.3
STATE_RHO = 0.7
REWARD_SCALE = 0.1
HARM_REWARD = -1.0
_CALIBRATION_DRAWS = 400_000


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 20_000
    horizon: int = 10
    action_count: int = 9
    state_dim: int = 4
    harm_base_rate: float = 0.0182
    risk_signal_strength: float = 1.0
    demographic_mix: Mapping[str, Mapping[str, float]] = field(
        default_factory=lambda: DEFAULT_DEMOGRAPHIC_MIX
    )
    # logit offsets keyed "dimension:level", e.g. {"race:Black": 0.3}
    demographic_offsets: Mapping[str, float] = field(default_factory=dict)
    behavior: str = "uniform"
    behavior_strength: float = 1.0
    gamma: float = 0.99
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_patients < 1:
            raise InvalidConfig("n_patients must be >= 1")
        if self.horizon < 1:
            raise InvalidConfig("horizon must be >= 1")
        if self.action_count < 2:
            raise InvalidConfig("action_count must be >= 2")
        if self.state_dim < 1:
            raise InvalidConfig("state_dim must be >= 1")
        if not 0.0 <= self.harm_base_rate <= 1.0:
            raise InvalidConfig("harm_base_rate must lie in [0, 1]")
        if self.risk_signal_strength < 0:
            raise InvalidConfig("risk_signal_strength must be >= 0")
        if self.behavior not in ("uniform", "softmax"):
            raise InvalidConfig(f"unknown behavior policy {self.behavior!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidConfig("gamma must lie in [0, 1]")
        for dim, probs in self.demographic_mix.items():
            if dim not in _LEVELS:
                raise InvalidConfig(f"unknown demographic dimension {dim!r}")
            if any(lvl not in _LEVELS[dim] for lvl in probs):
                raise InvalidConfig(f"unknown level in demographic_mix[{dim!r}]")
            if any(p < 0 for p in probs.values()) or sum(probs.values()) <= 0:
                raise InvalidConfig(f"demographic_mix[{dim!r}] must be non-negative with positive mass")
        for key in self.demographic_offsets:
            dim, _, lvl = key.partition(":")
            if dim not in _LEVELS or lvl not in _LEVELS[dim]:
                raise InvalidConfig(f"bad demographic offset key {key!r}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise InvalidConfig(f"unknown synth keys: {sorted(extra)}")
        return cls(**data)


def _mix_arrays(mix: Mapping[str, Mapping[str, float]]) -> dict[str, tuple[tuple[str, ...], np.ndarray]]:
    out = {}
    for dim, levels in _LEVELS.items():
        probs = mix.get(dim) or {"Unknown": 1.0}
        names = tuple(lvl for lvl in levels if probs.get(lvl, 0.0) > 0)
        p = np.array([probs[lvl] for lvl in names], dtype=np.float64)
        out[dim] = (names, np.cumsum(p / p.sum()))
    return out


@dataclass
class GroundTruthMDP:
    """Parameters of the generating process plus the latent per-patient draws."""

    action_count: int
    state_dim: int
    horizon: int
    gamma: float
    harm_intercept: float
    risk_signal_strength: float
    state_risk: np.ndarray
    action_effects: np.ndarray
    engagement_state: np.ndarray
    behavior: str
    behavior_weights: np.ndarray
    behavior_strength: float
    demographic_mix: dict[str, dict[str, float]]
    demographic_offsets: dict[str, float]
    patient_ids: list[str] = field(default_factory=list)
    patient_frailty: np.ndarray = field(default_factory=lambda: np.zeros(0))
    patient_offset: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def time_feature(self, t: np.ndarray) -> np.ndarray:
        if self.horizon == 1:
            return np.zeros(np.shape(t))
        return 2.0 * np.asarray(t, dtype=np.float64) / (self.horizon - 1) - 1.0

    def risk_score(self, frailty, states, t, actions) -> np.ndarray:
        """Latent risk before strength scaling and intercept."""
        return (
            FRAILTY_RISK * frailty
            + states @ self.state_risk
            + TIME_RISK * self.time_feature(t)
            + ACTION_RISK * self.action_effects[actions]
        )

    def harm_prob(self, frailty, offset, states, t, actions) -> np.ndarray:
        logit = self.harm_intercept + self.risk_signal_strength * self.risk_score(
            frailty, states, t, actions
        ) + offset
        return expit(logit)

    def engagement(self, frailty, states, noise) -> np.ndarray:
        return expit(0.5 - 0.8 * frailty + states @ self.engagement_state + noise)

    def behavior_probs(self, states: np.ndarray) -> np.ndarray:
        n = len(states)
        if self.behavior == "uniform":
            return np.full((n, self.action_count), 1.0 / self.action_count)
        logits = self.behavior_strength * (states @ self.behavior_weights)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def harm_probability(self, ds: Dataset) -> np.ndarray:
        """True per-step harm probability for a dataset generated from this MDP."""
        index = {p: i for i, p in enumerate(self.patient_ids)}
        rows = np.fromiter((index[p] for p in ds.patient_id), dtype=np.int64, count=len(ds))
        return self.harm_prob(
            self.patient_frailty[rows], self.patient_offset[rows], ds.states, ds.t, ds.action
        )

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GroundTruthMDP":
        arrays = {"state_risk", "action_effects", "engagement_state", "behavior_weights",
                  "patient_frailty", "patient_offset"}
        kwargs = {k: (np.asarray(v, dtype=np.float64) if k in arrays else v) for k, v in data.items()}
        return cls(**kwargs)

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "GroundTruthMDP":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sample_categories(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)


def _sample_actions(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    return np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def _offsets(cfg_offsets: Mapping[str, float], demo_codes: dict[str, np.ndarray],
             mix: dict[str, tuple[tuple[str, ...], np.ndarray]]) -> np.ndarray:
    n = len(next(iter(demo_codes.values())))
    out = np.zeros(n)
    for key, value in cfg_offsets.items():
        dim, _, lvl = key.partition(":")
        names = mix[dim][0]
        if lvl in names:
            out += value * (demo_codes[dim] == names.index(lvl))
    return out


def _build_mdp(cfg: SynthConfig) -> GroundTruthMDP:
    """Draw the fixed structural parameters and solve for the harm intercept."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xC0FFEE])))
    d, A = cfg.state_dim, cfg.action_count
    direction = rng.standard_normal(d)
    state_risk = STATE_RISK * direction / np.linalg.norm(direction)
    action_effects = np.linspace(-1.0, 1.0, A)
    engagement_state = 0.5 * rng.standard_normal(d) / math.sqrt(d)
    behavior_weights = rng.standard_normal((d, A))
    mdp = GroundTruthMDP(
        action_count=A,
        state_dim=d,
        horizon=cfg.horizon,
        gamma=cfg.gamma,
        harm_intercept=0.0,
        risk_signal_strength=cfg.risk_signal_strength,
        state_risk=state_risk,
        action_effects=action_effects,
        engagement_state=engagement_state,
        behavior=cfg.behavior,
        behavior_weights=behavior_weights,
        behavior_strength=cfg.behavior_strength,
        demographic_mix={k: dict(v) for k, v in cfg.demographic_mix.items()},
        demographic_offsets=dict(cfg.demographic_offsets),
    )

    if cfg.harm_base_rate <= 0.0:
        mdp.harm_intercept = -math.inf
        return mdp
    if cfg.harm_base_rate >= 1.0:
        mdp.harm_intercept = math.inf
        return mdp
    # the stationary state law is N(0, I), so draw it directly
    n = _CALIBRATION_DRAWS
    frailty = rng.standard_normal(n)
    states = rng.standard_normal((n, d))
    t = rng.integers(0, cfg.horizon, n)
    actions = _sample_actions(mdp.behavior_probs(states), rng.random(n))
    z = cfg.risk_signal_strength * mdp.risk_score(frailty, states, t, actions)
    if cfg.demographic_offsets:
        mix = _mix_arrays(cfg.demographic_mix)
        codes = {dim: _sample_categories(cum, rng.random(n)) for dim, (_, cum) in mix.items()}
        z = z + _offsets(cfg.demographic_offsets, codes, mix)

    def excess(b: float) -> float:
        return float(expit(b + z).mean()) - cfg.harm_base_rate

    # bracket around a first guess, widening until the sign changes
    guess = math.log(cfg.harm_base_rate / (1.0 - cfg.harm_base_rate)) - float(np.median(z))
    lo, hi, width = guess - 1.0, guess + 1.0, 1.0
    while excess(lo) > 0.0 and lo > -60.0:
        width *= 2.0
        lo = max(guess - width, -60.0)
    while excess(hi) < 0.0 and hi < 60.0:
        width *= 2.0
        hi = min(guess + width, 60.0)
    mdp.harm_intercept = float(brentq(excess, lo, hi, xtol=1e-12))
    return mdp


def _draw_patient_blocks(cfg: SynthConfig, threads: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-patient normal and uniform draws, one spawned stream per patient."""
    H, d = cfg.horizon, cfg.state_dim
    n_norm = 1 + d * H + H
    n_unif = 3 + 2 * H
    normals = np.empty((cfg.n_patients, n_norm))
    uniforms = np.empty((cfg.n_patients, n_unif))
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)

    def fill(lo: int, hi: int) -> None:
        for i in range(lo, hi):
            g = np.random.Generator(np.random.PCG64(children[i]))
            normals[i] = g.standard_normal(n_norm)
            uniforms[i] = g.random(n_unif)

    threads = max(1, int(threads))
    if threads == 1:
        fill(0, cfg.n_patients)
    else:
        bounds = np.linspace(0, cfg.n_patients, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, bounds[:-1], bounds[1:]))
    return normals, uniforms


def generate_dataset(cfg: SynthConfig, threads: int = 1) -> tuple[Dataset, GroundTruthMDP]:
    """Simulate ``cfg.n_patients`` episodes of exactly ``cfg.horizon`` steps."""
    mdp = _build_mdp(cfg)
    H, d, P = cfg.horizon, cfg.state_dim, cfg.n_patients
    normals, uniforms = _draw_patient_blocks(cfg, threads)

    frailty = normals[:, 0]
    state_noise = normals[:, 1:1 + d * H].reshape(P, H, d)
    eng_noise = 0.5 * normals[:, 1 + d * H:]
    mix = _mix_arrays(cfg.demographic_mix)
    codes = {
        dim: _sample_categories(cum, uniforms[:, j])
        for j, (dim, (_, cum)) in enumerate(mix.items())
    }
    offset = _offsets(cfg.demographic_offsets, codes, mix)
    u_action = uniforms[:, 3:3 + H]
    u_harm = uniforms[:, 3 + H:]

    states = np.empty((P, H, d))
    actions = np.empty((P, H), dtype=np.int64)
    harm = np.empty((P, H), dtype=bool)
    reward = np.empty((P, H))
    innov = math.sqrt(1.0 - STATE_RHO**2)
    for t in range(H):
        s = state_noise[:, 0] if t == 0 else STATE_RHO * states[:, t - 1] + innov * state_noise[:, t]
        states[:, t] = s
        a = _sample_actions(mdp.behavior_probs(s), u_action[:, t])
        actions[:, t] = a
        p = mdp.harm_prob(frailty, offset, s, np.full(P, t), a)
        harm[:, t] = u_harm[:, t] < p
        eng = mdp.engagement(frailty, s, eng_noise[:, t])
        reward[:, t] = np.where(harm[:, t], HARM_REWARD, REWARD_SCALE * eng)

    width = len(str(P - 1))
    pids = [f"p{i:0{width}d}" for i in range(P)]
    mdp.patient_ids = pids
    mdp.patient_frailty = frailty.copy()
    mdp.patient_offset = offset
    demographics = {
        pid: Demographics(
            age_bin=mix["age_bin"][0][codes["age_bin"][i]],
            sex=mix["sex"][0][codes["sex"][i]],
            race=mix["race"][0][codes["race"][i]],
        )
        for i, pid in enumerate(pids)
    }
    step_pid = np.repeat(np.array(pids, dtype=object), H)
    ds = Dataset.from_columns(
        patient_id=step_pid,
        episode_id=np.array([f"{p}:0" for p in step_pid], dtype=object),
        t=np.tile(np.arange(H), P),
        states=states.reshape(P * H, d),
        action=actions.ravel(),
        reward=reward.ravel(),
        harm=harm.ravel(),
        feature_names=[f"s{j}" for j in range(d)],
        action_count=cfg.action_count,
        demographics=demographics,
    )
    return ds, mdp


# --------------------------------------------------------------------------
# exact / Monte Carlo policy values


@dataclass(frozen=True)
class PolicyValue:
    value: float
    stderr: float = 0.0
    n_rollouts: int = 0

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class TabularMDP:
    """Finite MDP with an absorbing terminal state.

    ``terminate[s, a]`` is the chance the episode ends after taking ``a`` in
    ``s``; otherwise the next state follows ``transition[s, a]``. Rewards are
    ``reward[s, a]`` plus optional Gaussian noise of scale ``reward_noise``.
    """

    transition: np.ndarray
    reward: np.ndarray
    terminate: np.ndarray
    initial: np.ndarray
    reward_noise: float = 0.0

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    def one_hot(self, s: np.ndarray) -> np.ndarray:
        return np.eye(self.n_states)[np.asarray(s)]

    def policy_matrix(self, policy) -> np.ndarray:
        """``(S, A)`` action probabilities; tabular policies see only the state."""
        S = self.n_states
        return np.asarray(policy.action_probs(np.eye(S), np.zeros(S, dtype=np.int64), np.zeros(S)))

    def state_values(self, pi: np.ndarray, gamma: float) -> np.ndarray:
        cont = (1.0 - self.terminate)[:, :, None] * self.transition
        m = np.einsum("sa,sat->st", pi, cont)
        r = (pi * self.reward).sum(axis=1)
        return np.linalg.solve(np.eye(self.n_states) - gamma * m, r)

    def q_values(self, pi: np.ndarray, gamma: float) -> np.ndarray:
        v = self.state_values(pi, gamma)
        cont = (1.0 - self.terminate)[:, :, None] * self.transition
        return self.reward + gamma * cont @ v


def random_tabular_mdp(
    n_states: int = 3, n_actions: int = 3, seed: int = 0, terminate: float = 0.2,
    reward_noise: float = 0.1,
) -> TabularMDP:
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.uniform(-1.0, 1.0, (n_states, n_actions))
    term = np.full((n_states, n_actions), terminate)
    return TabularMDP(transition, reward, term, np.full(n_states, 1.0 / n_states), reward_noise)


def generate_tabular_dataset(
    mdp: TabularMDP, behavior: np.ndarray, n_steps: int, seed: int = 0, max_len: int = 10_000
) -> Dataset:
    """Roll out whole episodes under ``behavior`` until ``n_steps`` is reached."""
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    pid, eid, tt, ss, aa, rr = [], [], [], [], [], []
    ep = 0
    while len(aa) < n_steps:
        s = rng.choice(S, p=mdp.initial)
        for t in range(max_len):
            a = rng.choice(A, p=behavior[s])
            r = mdp.reward[s, a] + mdp.reward_noise * rng.standard_normal()
            pid.append(f"e{ep}")
            eid.append(f"e{ep}:0")
            tt.append(t)
            ss.append(s)
            aa.append(a)
            rr.append(r)
            if rng.random() < mdp.terminate[s, a]:
                break
            s = rng.choice(S, p=mdp.transition[s, a])
        ep += 1
    return Dataset.from_columns(
        patient_id=pid,
        episode_id=eid,
        t=tt,
        states=mdp.one_hot(np.array(ss)),
        action=aa,
        reward=rr,
        feature_names=[f"state{j}" for j in range(S)],
        action_count=A,
    )


def true_policy_value(
    mdp: GroundTruthMDP | TabularMDP,
    policy,
    gamma: float,
    n_rollouts: int = 100_000,
    seed: int = 0,
) -> PolicyValue:
    """Expected discounted return from the initial state under ``policy``.

    Tabular MDPs are solved exactly. The synthetic patient process is
    estimated by Monte Carlo over fresh patients and reports a standard
    error.
    """
    if isinstance(mdp, TabularMDP):
        pi = mdp.policy_matrix(policy)
        return PolicyValue(float(mdp.initial @ mdp.state_values(pi, gamma)))

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    n, H, d = n_rollouts, mdp.horizon, mdp.state_dim
    frailty = rng.standard_normal(n)
    mix = _mix_arrays(mdp.demographic_mix)
    codes = {dim: _sample_categories(cum, rng.random(n)) for dim, (_, cum) in mix.items()}
    offset = _offsets(mdp.demographic_offsets, codes, mix)
    innov = math.sqrt(1.0 - STATE_RHO**2)
    s = rng.standard_normal((n, d))
    prev = np.zeros(n)
    ret = np.zeros(n)
    for t in range(H):
        if t:
            s = STATE_RHO * s + innov * rng.standard_normal((n, d))
        tt = np.full(n, t)
        probs = np.asarray(policy.action_probs(s, tt, prev))
        a = _sample_actions(probs, rng.random(n))
        p = mdp.harm_prob(frailty, offset, s, tt, a)
        harm = rng.random(n) < p
        eng = mdp.engagement(frailty, s, 0.5 * rng.standard_normal(n))
        r = np.where(harm, HARM_REWARD, REWARD_SCALE * eng)
        ret += gamma**t * r
        prev = r
    return PolicyValue(float(ret.mean()), float(ret.std(ddof=1) / math.sqrt(n)), n)
