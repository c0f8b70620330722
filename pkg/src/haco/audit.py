"""Subgroup auditing: episode returns, bootstrap intervals and tests,
effect sizes, and calibration bins with Wilson intervals.

Bootstrap replicate ``b`` always draws from its own stream spawned from the
seed, so results do not depend on how replicates are split across threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InsufficientData, NoDemographics, TooFewSamples, ZeroVariance
from .trajectory_store import AGE_LEVELS, RACE_LEVELS, SEX_LEVELS, Dataset

GROUPS = {"Age": ("age_bin", AGE_LEVELS), "Sex": ("sex", SEX_LEVELS), "Race": ("race", RACE_LEVELS)}


@dataclass(frozen=True)
class SubgroupSummary:
    group: str
    level: str
    n: int
    mean: float
    ci_low: float
    ci_high: float
    reference_level: str
    p_value: float
    cohens_d: float | None = None

    @property
    def is_reference(self) -> bool:
        return self.level == self.reference_level


@dataclass(frozen=True)
class CalibrationBin:
    bin_index: int
    mean_predicted: float
    observed_rate: float
    n: int
    wilson_low: float
    wilson_high: float


def episodic_return(rewards: Sequence[float], gamma: float = 1.0) -> float:
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) == 0:
        raise InsufficientData("episode has no steps")
    return float(np.sum(gamma ** np.arange(len(r)) * r))


def episode_returns(ds: Dataset, gamma: float = 1.0) -> np.ndarray:
    """Discounted return of every episode, discounting from each episode's start."""
    offset = np.arange(len(ds)) - ds.episode_bounds[ds.episode_index, 0]
    disc = ds.reward * gamma ** offset.astype(np.float64)
    return np.add.reduceat(disc, ds.episode_bounds[:, 0])


def _bootstrap_means(values: np.ndarray, B: int, seed_key: Sequence[int], threads: int) -> np.ndarray:
    children = np.random.SeedSequence(list(seed_key)).spawn(B)
    n = len(values)
    out = np.empty(B)

    def run(lo: int, hi: int) -> None:
        for b in range(lo, hi):
            g = np.random.Generator(np.random.PCG64(children[b]))
            out[b] = values[g.integers(0, n, n)].mean()

    _parallel(run, B, threads)
    return out


def _parallel(fn: Callable[[int, int], None], total: int, threads: int) -> None:
    threads = max(1, int(threads))
    if threads == 1 or total < 2:
        fn(0, total)
        return
    bounds = np.linspace(0, total, threads + 1).astype(int)
    with ThreadPoolExecutor(threads) as pool:
        list(pool.map(fn, bounds[:-1], bounds[1:]))


def bootstrap_ci(
    values: Sequence[float], B: int = 500, level: float = 0.95, seed: int = 0, threads: int = 1
) -> tuple[float, float, float]:
    """Percentile bootstrap interval for the mean; returns ``(mean, low, high)``."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise InsufficientData("bootstrap needs at least two values")
    if B < 100:
        raise InsufficientData("bootstrap needs B >= 100")
    means = _bootstrap_means(v, B, (seed, 0), threads)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(v.mean()), float(lo), float(hi)


def bootstrap_pvalue(
    group: Sequence[float], reference: Sequence[float], B: int = 1000, seed: int = 0,
    threads: int = 1, is_reference: bool = False,
) -> float:
    """Two-sided bootstrap p-value for a difference in means, floored at ``1/B``.

    Both samples are resampled independently; ``p = 2 min(P(D <= 0), P(D >= 0))``.
    """
    if is_reference:
        return 1.0
    g = np.asarray(group, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if len(g) == 0 or len(r) == 0:
        raise InsufficientData("both samples must be non-empty")
    diff = _bootstrap_means(g, B, (seed, 1), threads) - _bootstrap_means(r, B, (seed, 2), threads)
    p = 2.0 * min(np.mean(diff <= 0), np.mean(diff >= 0))
    return float(min(1.0, max(1.0 / B, p)))


def cohens_d(group: Sequence[float], reference: Sequence[float]) -> float:
    g = np.asarray(group, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if len(g) < 2 or len(r) < 2:
        raise InsufficientData("Cohen's d needs at least two values per sample")
    # s^2 here is the plain (1/n) variance of each sample, so {0, 2} vs {1, 3} gives d = -1
    pooled = ((len(g) - 1) * g.var() + (len(r) - 1) * r.var()) / (len(g) + len(r) - 2)
    if pooled <= 0:
        raise ZeroVariance("pooled standard deviation is zero")
    return float((g.mean() - r.mean()) / math.sqrt(pooled))


def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n <= 0:
        raise TooFewSamples("Wilson interval needs n >= 1")
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    low = 0.0 if k == 0 else max(0.0, center - half)
    high = 1.0 if k == n else min(1.0, center + half)
    return low, high


def calibration_bins(
    predicted: Sequence[float], observed: Sequence[bool], B_bins: int = 10, z: float = 1.96
) -> list[CalibrationBin]:
    """Equal-count bins over predicted scores, each with a Wilson interval."""
    p = np.asarray(predicted, dtype=np.float64)
    y = np.asarray(observed, dtype=bool)
    if p.shape != y.shape:
        raise ValueError("predicted and observed lengths differ")
    if len(p) < B_bins:
        raise TooFewSamples(f"{len(p)} samples cannot fill {B_bins} bins")
    order = np.argsort(p, kind="stable")
    bins = []
    for i, idx in enumerate(np.array_split(order, B_bins)):
        k, n = int(y[idx].sum()), len(idx)
        low, high = wilson_interval(k, n, z)
        bins.append(CalibrationBin(i, float(p[idx].mean()), k / n, n, low, high))
    return bins


def episode_levels(ds: Dataset, group: str) -> np.ndarray:
    """Demographic level of every episode for ``group`` (Unknown sex counts as Male)."""
    attr, _ = GROUPS[group]
    levels = np.array(
        [getattr(ds.demographics_for(p), attr) for p in ds.episode_patients], dtype=object
    )
    if group == "Sex":
        levels[levels == "Unknown"] = "Male"
    return levels


def _reference(levels: np.ndarray, order: Sequence[str]) -> tuple[list[str], str]:
    present = [lvl for lvl in order if np.any(levels == lvl)]
    counts = {lvl: int(np.sum(levels == lvl)) for lvl in present}
    ref = max(present, key=lambda lvl: (counts[lvl], -present.index(lvl)))
    return present, ref


def subgroup_audit(
    ds: Dataset,
    returns: Sequence[float],
    B_ci: int = 500,
    B_p: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    threads: int = 1,
) -> list[SubgroupSummary]:
    """Per-level mean return with CI, and bootstrap p-value and Cohen's d
    against the largest level of each demographic dimension."""
    if not ds.demographics:
        raise NoDemographics("dataset has no demographics; merge them first")
    values = np.asarray(returns, dtype=np.float64)
    if len(values) != ds.n_episodes:
        raise ValueError("need one return per episode")
    out = []
    for gi, (group, (_, order)) in enumerate(GROUPS.items()):
        levels = episode_levels(ds, group)
        present, ref = _reference(levels, order)
        ref_vals = values[levels == ref]
        for li, lvl in enumerate(present):
            vals = values[levels == lvl]
            key = seed * 1000 + gi * 100 + li
            if len(vals) >= 2:
                mean, lo, hi = bootstrap_ci(vals, B_ci, level, key, threads)
            else:
                mean = lo = hi = float(vals.mean())
            p = bootstrap_pvalue(vals, ref_vals, B_p, key, threads, is_reference=lvl == ref)
            try:
                d = 0.0 if lvl == ref else cohens_d(vals, ref_vals)
            except (InsufficientData, ZeroVariance):
                d = None
            out.append(SubgroupSummary(group, lvl, len(vals), mean, lo, hi, ref, p, d))
    return out


def subgroup_calibration(
    ds: Dataset, predicted: np.ndarray, B_bins: int = 10, z: float = 1.96
) -> list[tuple[str, str, CalibrationBin]]:
    """Calibration bins per demographic level, skipping levels too small to bin."""
    step_levels = {}
    for group in GROUPS:
        ep = episode_levels(ds, group)
        step_levels[group] = ep[ds.episode_index]
    rows = []
    for group, (_, order) in GROUPS.items():
        levels = step_levels[group]
        for lvl in order:
            sel = levels == lvl
            if sel.sum() < B_bins:
                continue
            for b in calibration_bins(predicted[sel], ds.harm[sel], B_bins, z):
                rows.append((group, lvl, b))
    return rows
