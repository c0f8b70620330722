"""Fitted Q evaluation with one ridge-regression head per action.

Each iteration regresses Bellman targets ``r + gamma * sum_a pi(a|s') Q(s', a)``
(just ``r`` on an episode's last step) onto standardized step features.
Feature Gram matrices do not change between iterations, so each action's
Cholesky factor is computed once.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import EmptyDataset, FeatureMismatch, InvalidConfig
from .policy import step_action_probs
from .risk_model import default_t_scale
from .trajectory_store import Dataset

log = logging.getLogger(__name__)


class ActionUnobserved(UserWarning):
    """An action never appears in the data; its Q head stays at zero."""


@dataclass(frozen=True)
class LinearQ:
    theta: np.ndarray  # (A, q + 1), intercept last, standardized feature space
    gamma: float
    ridge_lambda: float
    iterations_run: int
    converged: bool
    final_delta: float
    feature_names: tuple[str, ...]
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    include_time: bool
    t_scale: float

    @property
    def action_count(self) -> int:
        return self.theta.shape[0]

    def features(self, ds: Dataset) -> np.ndarray:
        if _q_feature_names(ds, self.include_time) != self.feature_names:
            raise FeatureMismatch("dataset features do not match the fitted Q function")
        return _standardize(_raw_features(ds, self.include_time, self.t_scale),
                            self.feature_mean, self.feature_scale)

    def q_values(self, ds: Dataset) -> np.ndarray:
        Z = self.features(ds)
        return Z @ self.theta[:, :-1].T + self.theta[:, -1]


@dataclass(frozen=True)
class FQEResult:
    v0: float
    v0_mode: str
    per_episode_v0: np.ndarray
    converged: bool
    final_delta: float

    def report(self, q: LinearQ, policy_name: str) -> dict:
        return {
            "policy_name": policy_name,
            "gamma": q.gamma,
            "ridge_lambda": q.ridge_lambda,
            "v0": self.v0,
            "v0_mode": self.v0_mode,
            "converged": self.converged,
            "iterations_run": q.iterations_run,
            "n_episodes": len(self.per_episode_v0),
        }


def _q_feature_names(ds: Dataset, include_time: bool) -> tuple[str, ...]:
    return (("t_normalized", "prev_reward") if include_time else ()) + tuple(ds.feature_names)


def _raw_features(ds: Dataset, include_time: bool, t_scale: float) -> np.ndarray:
    if include_time:
        return np.column_stack([ds.t / t_scale, ds.prev_reward, ds.states])
    return np.asarray(ds.states, dtype=np.float64)


def _standardize(X: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return (X - mean) / scale


def fit_fqe(
    ds: Dataset,
    policy,
    gamma: float = 0.99,
    ridge_lambda: float = 1.0,
    max_iters: int = 200,
    tol: float = 1e-6,
    include_time: bool = True,
    t_scale: float | None = None,
) -> LinearQ:
    """Iterate ridge-regression Bellman backups from ``Q = 0``."""
    if len(ds) == 0:
        raise EmptyDataset("FQE needs at least one step")
    if not 0.0 <= gamma <= 1.0:
        raise InvalidConfig("gamma must lie in [0, 1]")
    if ridge_lambda <= 0:
        raise InvalidConfig("ridge_lambda must be positive")
    A = ds.action_count
    scale = default_t_scale(ds) if t_scale is None else float(t_scale)
    raw = _raw_features(ds, include_time, scale)
    mean = raw.mean(axis=0)
    sd = raw.std(axis=0)
    sd[sd == 0] = 1.0
    Z = _standardize(raw, mean, sd)
    n, q = Z.shape

    heads = []
    for a in range(A):
        rows = np.flatnonzero(ds.action == a)
        if len(rows) == 0:
            warnings.warn(f"action {a} has no support; its Q head stays at 0", ActionUnobserved)
            heads.append(None)
            continue
        Xa = Z[rows]
        mu = Xa.mean(axis=0)
        Xc = Xa - mu
        chol = cho_factor(Xc.T @ Xc + ridge_lambda * np.eye(q))
        heads.append((rows, mu, Xc, chol))

    nonterm = np.flatnonzero(~ds.is_terminal)
    next_probs = step_action_probs(policy, ds)[nonterm + 1]
    reward = ds.reward

    def regress(y: np.ndarray) -> np.ndarray:
        theta = np.zeros((A, q + 1))
        for a, head in enumerate(heads):
            if head is None:
                continue
            rows, mu, Xc, chol = head
            ya = y[rows]
            ybar = ya.mean()
            w = cho_solve(chol, Xc.T @ (ya - ybar))
            theta[a, :q] = w
            theta[a, q] = ybar - mu @ w
        return theta

    theta = np.zeros((A, q + 1))
    converged, delta, it = False, np.inf, 0
    if gamma == 0.0 or len(nonterm) == 0:
        theta = regress(reward.copy())
        converged, delta, it = True, 0.0, 1
    else:
        Z_next = Z[nonterm + 1]
        for it in range(1, max_iters + 1):
            y = reward.copy()
            q_next = Z_next @ theta[:, :q].T + theta[:, q]
            y[nonterm] += gamma * np.sum(next_probs * q_next, axis=1)
            new = regress(y)
            delta = float(np.max(np.abs(new - theta)))
            theta = new
            if delta < tol:
                converged = True
                break
        if not converged:
            log.warning("FQE stopped after %d iterations (delta %.3e)", it, delta)

    return LinearQ(theta, float(gamma), float(ridge_lambda), it, converged, float(delta),
                   _q_feature_names(ds, include_time), mean, sd, include_time, scale)


def estimate_v0(q: LinearQ, ds: Dataset, policy, mode: str = "expectation") -> FQEResult:
    """Mean initial-state value over the episodes of ``ds``."""
    if mode not in ("expectation", "greedy"):
        raise InvalidConfig(f"unknown v0 mode {mode!r}")
    if ds.action_count != q.action_count:
        raise FeatureMismatch("action count differs from the fitted Q function")
    starts = ds.episode_bounds[:, 0]
    qv = q.q_values(ds)[starts]
    probs = step_action_probs(policy, ds)[starts]
    if mode == "expectation":
        per_ep = np.sum(probs * qv, axis=1)
    else:
        per_ep = qv[np.arange(len(starts)), np.argmax(probs, axis=1)]
    return FQEResult(float(per_ep.mean()), mode, per_ep, q.converged, q.final_delta)


def length_quartiles(ds: Dataset) -> np.ndarray:
    """Episode-length quartile (0-3) of each episode, by stable rank."""
    lengths = ds.episode_lengths
    rank = np.empty(len(lengths), dtype=np.int64)
    rank[np.argsort(lengths, kind="stable")] = np.arange(len(lengths))
    return (4 * rank) // len(lengths)


def stratified_episodes(ds: Dataset, subset_rows: int, seed: int = 0) -> np.ndarray:
    """Episode ordinals sampled from each length quartile, proportional to its rows.

    All episodes are returned when ``ds`` already fits in ``subset_rows``.
    """
    if len(ds) <= subset_rows:
        return np.arange(ds.n_episodes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF0E]))
    quart = length_quartiles(ds)
    lengths = ds.episode_lengths
    chosen = []
    for k in range(4):
        eps = np.flatnonzero(quart == k)
        if len(eps) == 0:
            continue
        budget = subset_rows * lengths[eps].sum() / len(ds)
        eps = rng.permutation(eps)
        used = np.cumsum(lengths[eps])
        take = max(1, int(np.searchsorted(used, budget, side="right")))
        chosen.extend(eps[:take].tolist())
    return np.array(sorted(chosen), dtype=np.int64)


def stratified_subset(ds: Dataset, subset_rows: int, seed: int = 0) -> Dataset:
    ords = stratified_episodes(ds, subset_rows, seed)
    return ds if len(ords) == ds.n_episodes else ds.select_episodes(ords)
