"""Softmax (multinomial logistic) policies: safe-set preference and BC.

Every policy exposes ``action_probs(states, t, prev_reward)`` on batches and
``greedy`` (argmax, lowest index on ties). Policies that can only be
evaluated on the logged steps, such as externally trained ones supplied as
a probability table, implement ``step_probs(ds)`` instead;
:func:`step_action_probs` dispatches between the two.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import (
    DidNotConverge,
    EmptySafeSet,
    FeatureMismatch,
    InvalidConfig,
    SingleActionSafeSet,
)
from .risk_model import MAX_CONDITION, default_t_scale, feature_matrix, feature_names
from .trajectory_store import Dataset


class Policy(Protocol):
    action_count: int

    def action_probs(self, states: np.ndarray, t: np.ndarray, prev_reward: np.ndarray) -> np.ndarray: ...

    def greedy(self, states: np.ndarray, t: np.ndarray, prev_reward: np.ndarray) -> np.ndarray: ...


class _GreedyMixin:
    def greedy(self, states, t, prev_reward) -> np.ndarray:
        return np.argmax(self.action_probs(states, t, prev_reward), axis=1)


@dataclass(frozen=True)
class SoftmaxPolicy(_GreedyMixin):
    """``pi(a|x) = softmax(W x + b)`` with action 0 as the pinned reference."""

    W: np.ndarray
    b: np.ndarray
    feature_names: tuple[str, ...]
    l2_lambda: float
    t_scale: float
    name: str = "softmax"

    @property
    def action_count(self) -> int:
        return len(self.b)

    def features(self, states, t, prev_reward) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if states.shape[1] != len(self.feature_names) - 2:
            raise FeatureMismatch(
                f"policy expects {len(self.feature_names) - 2} state features, got {states.shape[1]}"
            )
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(states),))
        prev = np.broadcast_to(np.asarray(prev_reward, dtype=np.float64), (len(states),))
        return np.column_stack([t / self.t_scale, prev, states])

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != len(self.feature_names):
            raise FeatureMismatch(f"expected {len(self.feature_names)} features, got {X.shape[-1]}")
        return X @ self.W.T + self.b

    def probs_from_features(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X), axis=-1)

    def action_probs(self, states, t, prev_reward) -> np.ndarray:
        return self.probs_from_features(self.features(states, t, prev_reward))

    def to_dict(self) -> dict:
        return {
            "type": "softmax",
            "name": self.name,
            "action_count": self.action_count,
            "feature_names": list(self.feature_names),
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "l2_lambda": self.l2_lambda,
            "t_scale": self.t_scale,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SoftmaxPolicy":
        W = np.asarray(data["W"], dtype=np.float64).reshape(data["action_count"], -1)
        return cls(
            W=W,
            b=np.asarray(data["b"], dtype=np.float64),
            feature_names=tuple(data["feature_names"]),
            l2_lambda=float(data.get("l2_lambda", 0.0)),
            t_scale=float(data.get("t_scale", 1.0)),
            name=data.get("name", "softmax"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2))


@dataclass(frozen=True)
class UniformPolicy(_GreedyMixin):
    action_count: int
    name: str = "uniform"

    def action_probs(self, states, t, prev_reward) -> np.ndarray:
        n = len(np.atleast_2d(states))
        return np.full((n, self.action_count), 1.0 / self.action_count)


@dataclass(frozen=True)
class StateTablePolicy(_GreedyMixin):
    """Probabilities looked up by one-hot state: ``probs = states @ table``."""

    table: np.ndarray
    name: str = "table"

    @property
    def action_count(self) -> int:
        return self.table.shape[1]

    def action_probs(self, states, t, prev_reward) -> np.ndarray:
        return np.atleast_2d(states) @ self.table


@dataclass(frozen=True)
class StepTablePolicy:
    """Per-step probabilities for one specific dataset, keyed by step index.

    This is how externally trained policies plug in.
    """

    probs: np.ndarray
    name: str = "external"

    @property
    def action_count(self) -> int:
        return self.probs.shape[1]

    def step_probs(self, ds: Dataset) -> np.ndarray:
        if len(self.probs) != len(ds):
            raise FeatureMismatch(f"table covers {len(self.probs)} steps, dataset has {len(ds)}")
        if self.probs.shape[1] != ds.action_count:
            raise FeatureMismatch("table action count differs from dataset")
        return self.probs

    @classmethod
    def read_csv(cls, path: str | Path, name: str | None = None) -> "StepTablePolicy":
        """Read ``step,p0,...,p{A-1}`` rows; steps may come in any order."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[0] != "step":
            raise InvalidConfig("external policy CSV must start with a 'step' column")
        idx = np.array([int(r[0]) for r in body])
        probs = np.array([[float(v) for v in r[1:]] for r in body])
        if sorted(idx.tolist()) != list(range(len(idx))):
            raise InvalidConfig("external policy CSV must cover steps 0..n-1 exactly once")
        out = np.empty_like(probs)
        out[idx] = probs
        if np.any(out < 0) or np.any(np.abs(out.sum(axis=1) - 1.0) > 1e-6):
            raise InvalidConfig("external policy rows must be probability vectors")
        return cls(out / out.sum(axis=1, keepdims=True), name or Path(path).stem)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"p{a}" for a in range(self.action_count)])
            for i, row in enumerate(self.probs):
                w.writerow([i] + [repr(float(v)) for v in row])


def step_action_probs(policy, ds: Dataset) -> np.ndarray:
    """``(len(ds), A)`` action probabilities of ``policy`` at every logged step."""
    if hasattr(policy, "step_probs"):
        return np.asarray(policy.step_probs(ds))
    probs = np.asarray(policy.action_probs(ds.states, ds.t, ds.prev_reward))
    if probs.shape != (len(ds), ds.action_count):
        raise FeatureMismatch(f"policy returned shape {probs.shape}")
    return probs


def load_policy(path: str | Path):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return StepTablePolicy.read_csv(path)
    data = json.loads(path.read_text())
    kind = data.get("type")
    if kind == "softmax":
        return SoftmaxPolicy.from_dict(data)
    if kind == "uniform":
        return UniformPolicy(int(data["action_count"]))
    raise InvalidConfig(f"unknown policy type {kind!r}")


# --------------------------------------------------------------------------
# multinomial fit


def _unpack(theta: np.ndarray, A: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    free = theta.reshape(A - 1, d + 1)
    W = np.vstack([np.zeros(d), free[:, :d]])
    b = np.r_[0.0, free[:, d]]
    return W, b


def multinomial_objective(theta, X, actions, A, lam, weights=None) -> float:
    """Weighted mean cross-entropy + ``lam/2 * |theta|^2`` (reference class fixed)."""
    n, d = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    W, b = _unpack(theta, A, d)
    logp = log_softmax(X @ W.T + b, axis=1)
    ce = -(w * logp[np.arange(n), actions]).sum() / w.sum()
    return float(ce + 0.5 * lam * theta @ theta)


def multinomial_gradient(theta, X, actions, A, lam, weights=None) -> np.ndarray:
    n, d = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    W, b = _unpack(theta, A, d)
    P = softmax(X @ W.T + b, axis=1)
    R = P.copy()
    R[np.arange(n), actions] -= 1.0
    R *= (w / w.sum())[:, None]
    X1 = np.hstack([X, np.ones((n, 1))])
    return (R[:, 1:].T @ X1).ravel() + lam * theta


def _hessian(P: np.ndarray, X1: np.ndarray, w: np.ndarray, lam: float) -> np.ndarray:
    K = P.shape[1] - 1
    q = X1.shape[1]
    H = np.empty((K * q, K * q))
    Pk = P[:, 1:]
    for j in range(K):
        for k in range(j, K):
            c = w * Pk[:, j] * ((j == k) - Pk[:, k])
            block = (X1 * c[:, None]).T @ X1
            H[j * q:(j + 1) * q, k * q:(k + 1) * q] = block
            if k != j:
                H[k * q:(k + 1) * q, j * q:(j + 1) * q] = block.T
    H[np.diag_indices_from(H)] += lam
    return H


def fit_multinomial(
    X: np.ndarray,
    actions: np.ndarray,
    action_count: int,
    l2_lambda: float = 1e-4,
    max_iter: int = 100,
    tol: float = 1e-8,
    sample_weight: np.ndarray | None = None,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Newton fit of the reference-class softmax model; returns ``(W, b)``."""
    X = np.asarray(X, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    n, d = X.shape
    A = action_count
    if l2_lambda == 0 and len(np.unique(actions)) < A:
        raise InvalidConfig("l2_lambda = 0 requires every action to be observed")
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    wn = w / w.sum()
    X1 = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros((A - 1) * (d + 1)) if init is None else np.array(init, dtype=np.float64)

    obj = multinomial_objective(theta, X, actions, A, l2_lambda, w)
    grad_norm = np.inf
    for _ in range(max_iter + 1):
        W, b = _unpack(theta, A, d)
        P = softmax(X @ W.T + b, axis=1)
        R = P.copy()
        R[np.arange(n), actions] -= 1.0
        grad = ((R[:, 1:] * wn[:, None]).T @ X1).ravel() + l2_lambda * theta
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            break
        H = _hessian(P, X1, wn, l2_lambda)
        if np.linalg.cond(H) > MAX_CONDITION:
            direction = -grad
        else:
            direction = -np.linalg.solve(H, grad)
        slope = float(grad @ direction)
        step = 1.0
        while step > 1e-12:
            cand = theta + step * direction
            cand_obj = multinomial_objective(cand, X, actions, A, l2_lambda, w)
            if cand_obj <= obj + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break
        theta, obj = cand, cand_obj
    if grad_norm > tol:
        raise DidNotConverge("multinomial fit did not converge", grad_norm)
    return _unpack(theta, A, d)


def _fit_policy(ds: Dataset, rows: np.ndarray, t_scale: float, l2_lambda: float,
                max_iter: int, tol: float, sample_weight, name: str) -> SoftmaxPolicy:
    X = feature_matrix(ds, use_state=True, t_scale=t_scale)[rows]
    W, b = fit_multinomial(
        X, ds.action[rows], ds.action_count, l2_lambda, max_iter, tol,
        None if sample_weight is None else np.asarray(sample_weight)[rows],
    )
    return SoftmaxPolicy(W, b, feature_names(ds.feature_names, True), float(l2_lambda), t_scale, name)


def fit_preference_policy(
    ds: Dataset,
    safe_mask: np.ndarray,
    l2_lambda: float = 1e-4,
    max_iter: int = 100,
    tol: float = 1e-8,
    t_scale: float | None = None,
    sample_weight: np.ndarray | None = None,
) -> SoftmaxPolicy:
    """Multinomial fit on the gated-safe steps only.

    ``sample_weight`` is an optional per-step hook; it is unused unless given.
    """
    mask = np.asarray(safe_mask, dtype=bool)
    if mask.shape != (len(ds),):
        raise ValueError("safe_mask must have one entry per step")
    rows = np.flatnonzero(mask)
    if len(rows) == 0:
        raise EmptySafeSet("safe subset is empty")
    if len(np.unique(ds.action[rows])) < 2:
        raise SingleActionSafeSet("safe subset contains a single action")
    scale = default_t_scale(ds) if t_scale is None else t_scale
    return _fit_policy(ds, rows, scale, l2_lambda, max_iter, tol, sample_weight, "haco")


def fit_behavior_cloning(
    train: Dataset,
    test: Dataset,
    l2_lambda: float = 1e-4,
    max_iter: int = 100,
    tol: float = 1e-8,
    t_scale: float | None = None,
) -> tuple[SoftmaxPolicy, float]:
    """Imitate logged actions on ``train``; report greedy accuracy on ``test``."""
    if set(train.episode_id) & set(test.episode_id):
        raise ValueError("train and test must be episode-disjoint")
    if len(np.unique(train.action)) < 2:
        raise SingleActionSafeSet("training data contains a single action")
    scale = default_t_scale(train) if t_scale is None else t_scale
    policy = _fit_policy(train, np.arange(len(train)), scale, l2_lambda, max_iter, tol, None, "bc")
    pred = policy.greedy(test.states, test.t, test.prev_reward)
    return policy, float(np.mean(pred == test.action))


def action_probs(policy: SoftmaxPolicy, x: np.ndarray) -> np.ndarray:
    """Probabilities from an already-built feature vector (or matrix)."""
    return policy.probs_from_features(x)
