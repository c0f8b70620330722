"""Split-conformal harm threshold, the step gate, and its diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyCalibration, EmptySafeSet, InvalidAlpha
from .risk_model import RiskModel, score_dataset
from .trajectory_store import Dataset


@dataclass(frozen=True)
class CalibrationResult:
    alpha: float
    tau: float
    calib_size: int
    scores_sorted: np.ndarray
    rank_used: int
    guarantee_degraded: bool

    def report(self) -> dict:
        return {
            "alpha": self.alpha,
            "tau": self.tau,
            "calib_size": self.calib_size,
            "rank_used": self.rank_used,
            "guarantee_degraded": self.guarantee_degraded,
        }


@dataclass(frozen=True)
class SafetyImpact:
    harm_rate_all: float
    harm_rate_safe: float
    absolute_reduction: float
    relative_reduction: float | None
    safe_fraction: float

    @classmethod
    def from_rates(cls, harm_rate_all: float, harm_rate_safe: float,
                   safe_fraction: float = 1.0) -> "SafetyImpact":
        rel = 1.0 - harm_rate_safe / harm_rate_all if harm_rate_all > 0 else None
        return cls(harm_rate_all, harm_rate_safe, harm_rate_all - harm_rate_safe, rel, safe_fraction)

    @property
    def zero_harm_rate(self) -> bool:
        return self.relative_reduction is None

    def report(self) -> dict:
        return {
            "harm_rate_all": self.harm_rate_all,
            "harm_rate_safe": self.harm_rate_safe,
            "absolute_reduction": self.absolute_reduction,
            "relative_reduction": self.relative_reduction,
            "safe_fraction": self.safe_fraction,
        }


def conformal_rank(m: int, alpha: float) -> int:
    """``min(M, ceil((M + 1)(1 - alpha)))``, guarded against float fuzz."""
    raw = (m + 1) * (1.0 - alpha)
    rank = math.ceil(raw - 1e-9 * max(1.0, raw))
    return max(1, min(m, rank))


def calibrate_threshold(calib_scores: Sequence[float] | np.ndarray, alpha: float) -> CalibrationResult:
    """Pick tau as the conformal order statistic of the calibration scores."""
    if not 0.0 < alpha < 1.0:
        raise InvalidAlpha(f"alpha must lie in (0, 1), got {alpha}")
    scores = np.sort(np.asarray(calib_scores, dtype=np.float64))
    m = len(scores)
    if m == 0:
        raise EmptyCalibration("calibration set is empty")
    if not np.all(np.isfinite(scores)):
        raise ValueError("calibration scores must be finite")
    raw_rank = math.ceil((m + 1) * (1.0 - alpha) - 1e-9 * (m + 1))
    rank = conformal_rank(m, alpha)
    scores.flags.writeable = False
    return CalibrationResult(
        alpha=float(alpha),
        tau=float(scores[rank - 1]),
        calib_size=m,
        scores_sorted=scores,
        rank_used=rank,
        guarantee_degraded=raw_rank > m,
    )


def gate_scores(scores: np.ndarray, tau: float) -> np.ndarray:
    """Safe iff the score is strictly below tau."""
    return np.asarray(scores) < tau


def apply_gate(ds: Dataset, model: RiskModel, cal: CalibrationResult) -> np.ndarray:
    return gate_scores(score_dataset(model, ds), cal.tau)


def coverage_curve(
    calib_scores: np.ndarray, alphas: Sequence[float], eval_scores: np.ndarray
) -> list[tuple[float, float, float]]:
    """``(alpha, tau, safe_fraction)`` rows; safe fraction measured on ``eval_scores``."""
    alphas = [float(a) for a in alphas]
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise InvalidAlpha("alphas must be strictly increasing")
    eval_scores = np.asarray(eval_scores, dtype=np.float64)
    rows = []
    for a in alphas:
        cal = calibrate_threshold(calib_scores, a)
        rows.append((a, cal.tau, float(gate_scores(eval_scores, cal.tau).mean())))
    return rows


def safety_impact(harm: np.ndarray, mask: np.ndarray) -> SafetyImpact:
    harm = np.asarray(harm, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if harm.shape != mask.shape:
        raise ValueError("harm and mask lengths differ")
    if not mask.any():
        raise EmptySafeSet("no step passes the gate")
    return SafetyImpact.from_rates(
        float(harm.mean()), float(harm[mask].mean()), float(mask.mean())
    )
