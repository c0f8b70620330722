"""Regularized logistic harm model, fitted by Newton/IRLS, and rank AUC."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .errors import DegenerateLabels, DidNotConverge, FeatureMismatch
from .trajectory_store import Dataset, Step

log = logging.getLogger(__name__)

BASE_FEATURES = ("t_normalized", "prev_reward")
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class RiskFeatures:
    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.values) != len(self.names):
            raise FeatureMismatch("feature values and names differ in length")


@dataclass(frozen=True)
class RiskModel:
    weights: np.ndarray
    intercept: float
    l2_lambda: float
    feature_names: tuple[str, ...]
    t_scale: float = 1.0
    use_state: bool = False

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "weights": [float(w) for w in self.weights],
            "intercept": float(self.intercept),
            "l2_lambda": float(self.l2_lambda),
            "t_scale": float(self.t_scale),
            "use_state": bool(self.use_state),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RiskModel":
        return cls(
            weights=np.asarray(data["weights"], dtype=np.float64),
            intercept=float(data["intercept"]),
            l2_lambda=float(data["l2_lambda"]),
            feature_names=tuple(data["feature_names"]),
            t_scale=float(data.get("t_scale", 1.0)),
            use_state=bool(data.get("use_state", False)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "RiskModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def feature_names(state_names: Sequence[str], use_state: bool) -> tuple[str, ...]:
    extra = tuple(f"state_{n}" for n in state_names) if use_state else ()
    return BASE_FEATURES + extra


def featurize(step: Step, use_state: bool = False, t_scale: float = 1.0,
              state_names: Sequence[str] | None = None) -> RiskFeatures:
    if t_scale <= 0:
        raise ValueError("t_scale must be positive")
    vals = [step.t / t_scale, step.prev_reward]
    if use_state:
        vals.extend(step.state)
    names = state_names if state_names is not None else [str(j) for j in range(len(step.state))]
    return RiskFeatures(np.asarray(vals, dtype=np.float64), feature_names(names, use_state))


def feature_matrix(ds: Dataset, use_state: bool = False, t_scale: float = 1.0) -> np.ndarray:
    """Row-wise :func:`featurize` over a whole dataset."""
    if t_scale <= 0:
        raise ValueError("t_scale must be positive")
    cols = [ds.t / t_scale, ds.prev_reward]
    X = np.column_stack(cols)
    if use_state:
        X = np.hstack([X, ds.states])
    return X


def default_t_scale(ds: Dataset) -> float:
    return float(max(int(ds.t.max()), 1))


# --------------------------------------------------------------------------
# fitting


def _objective(theta: np.ndarray, X1: np.ndarray, y: np.ndarray, lam: float, pen: np.ndarray) -> float:
    z = X1 @ theta
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * np.sum(pen * theta**2))


def logistic_gradient(theta: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Gradient of the mean NLL plus ``lam/2 * |w|^2``; ``theta = [w, b]``."""
    X1 = np.hstack([X, np.ones((len(X), 1))])
    pen = np.r_[np.ones(X.shape[1]), 0.0]
    return X1.T @ (expit(X1 @ theta) - y) / len(y) + lam * pen * theta


def logistic_objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float) -> float:
    X1 = np.hstack([X, np.ones((len(X), 1))])
    pen = np.r_[np.ones(X.shape[1]), 0.0]
    return _objective(theta, X1, np.asarray(y, dtype=np.float64), lam, pen)


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    l2_lambda: float = 1e-4,
    max_iter: int = 100,
    tol: float = 1e-8,
    feature_names: Sequence[str] | None = None,
    init: np.ndarray | None = None,
    t_scale: float = 1.0,
    use_state: bool = False,
) -> RiskModel:
    """Minimize mean logistic loss + ``l2_lambda/2 * |w|^2`` (intercept free).

    Newton steps with backtracking; falls back to a gradient step when the
    Hessian is too ill-conditioned to solve. Starts from zero unless
    ``init`` (``[w..., b]``) is given.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    if l2_lambda == 0 and (y.min() == y.max()):
        raise DegenerateLabels("single-class labels need l2_lambda > 0")
    X1 = np.hstack([X, np.ones((n, 1))])
    pen = np.r_[np.ones(d), 0.0]
    theta = np.zeros(d + 1) if init is None else np.array(init, dtype=np.float64)

    obj = _objective(theta, X1, y, l2_lambda, pen)
    grad_norm = np.inf
    for _ in range(max_iter + 1):
        p = expit(X1 @ theta)
        grad = X1.T @ (p - y) / n + l2_lambda * pen * theta
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            break
        hess = (X1 * (p * (1 - p))[:, None]).T @ X1 / n + np.diag(l2_lambda * pen)
        if np.linalg.cond(hess) > MAX_CONDITION:
            direction = -grad
        else:
            direction = -np.linalg.solve(hess, grad)
        slope = float(grad @ direction)
        step = 1.0
        while step > 1e-12:
            cand = theta + step * direction
            cand_obj = _objective(cand, X1, y, l2_lambda, pen)
            if cand_obj <= obj + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break
        theta, obj = cand, cand_obj
    if grad_norm > tol:
        raise DidNotConverge("logistic fit did not converge", grad_norm)

    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(d))
    return RiskModel(theta[:d].copy(), float(theta[d]), float(l2_lambda), names, t_scale, use_state)


def fit_risk_model(ds: Dataset, use_state: bool = False, t_scale: float | None = None,
                   l2_lambda: float = 1e-4, max_iter: int = 100, tol: float = 1e-8) -> RiskModel:
    scale = default_t_scale(ds) if t_scale is None else t_scale
    X = feature_matrix(ds, use_state, scale)
    return fit_logistic(
        X, ds.harm, l2_lambda, max_iter, tol,
        feature_names=feature_names(ds.feature_names, use_state),
        t_scale=scale, use_state=use_state,
    )


def predict_harm(model: RiskModel, x: RiskFeatures) -> float:
    if tuple(x.names) != tuple(model.feature_names):
        raise FeatureMismatch(f"features {x.names} do not match model {model.feature_names}")
    return float(expit(model.weights @ x.values + model.intercept))


def score_dataset(model: RiskModel, ds: Dataset) -> np.ndarray:
    """Harm probability for every step of ``ds``."""
    names = feature_names(ds.feature_names, model.use_state)
    if names != tuple(model.feature_names):
        raise FeatureMismatch(f"dataset features {names} do not match model {model.feature_names}")
    X = feature_matrix(ds, model.use_state, model.t_scale)
    return expit(X @ model.weights + model.intercept)


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
