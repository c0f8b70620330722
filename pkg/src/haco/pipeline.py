"""End-to-end run: data, split, risk model, gate, policies, FQE, audit.

Every output is written with deterministic formatting and listed in
``manifest.json`` with its SHA-256, so two runs with the same config and
seed can be compared by hash. Worker threads only touch per-patient and
per-replicate random streams, and BLAS is pinned to one thread, so the
thread count never changes a byte of output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import audit as audit_mod
from .conformal import calibrate_threshold, coverage_curve, gate_scores, safety_impact
from .errors import (
    DegenerateLabels,
    EmptySafeSet,
    HacoError,
    InvalidConfig,
    MissingStageOutput,
    SingleActionSafeSet,
    StageError,
)
from .fqe import estimate_v0, fit_fqe, length_quartiles, stratified_episodes
from .policy import StepTablePolicy, fit_behavior_cloning, fit_preference_policy, load_policy
from .risk_model import auc, default_t_scale, fit_risk_model, score_dataset
from .synth import SynthConfig, generate_dataset
from .trajectory_store import (
    Dataset,
    LoadSummary,
    SplitSpec,
    load_trajectories,
    merge_demographics,
    temporal_split,
)

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "HACO_OUTPUT_DIR"

CORE_ARTIFACTS = (
    "load_summary",
    "risk_metrics",
    "calibration",
    "coverage_curve",
    "safety_impact",
    "bc_metrics",
    "fqe_report",
    "subgroup_audit",
    "calibration_bins",
)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class InputConfig:
    path: str
    format: str | None = None
    action_count: int = 9
    demographics: tuple[str, ...] = ()


@dataclass(frozen=True)
class RiskConfig:
    use_state: bool = False
    l2_lambda: float = 1e-4
    max_iter: int = 100
    tol: float = 1e-8


@dataclass(frozen=True)
class PolicyConfig:
    l2_lambda: float = 1e-3
    max_iter: int = 100
    tol: float = 1e-8


@dataclass(frozen=True)
class FQEConfig:
    gamma: float = 0.99
    ridge_lambda: float = 1.0
    max_iters: int = 200
    tol: float = 1e-6
    v0_mode: str = "expectation"
    subset_rows: int = 20_000
    include_time: bool = True


@dataclass(frozen=True)
class AuditConfig:
    B_ci: int = 500
    B_p: int = 1000
    bins: int = 10
    z: float = 1.96
    gamma: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    input: InputConfig | None = None
    synth: SynthConfig | None = None
    split: SplitSpec = field(default_factory=SplitSpec)
    alpha: float = 0.10
    alphas_for_curve: tuple[float, ...] = (0.01, 0.05, 0.10, 0.20, 0.30)
    risk: RiskConfig = field(default_factory=RiskConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    fqe: FQEConfig = field(default_factory=FQEConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)
    external_policies: tuple[str, ...] = ()
    seed: int = 0
    output_dir: str = "haco_run"

    def __post_init__(self) -> None:
        if (self.input is None) == (self.synth is None):
            raise InvalidConfig("exactly one of 'input' and 'synth' must be given")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidConfig("alpha must lie in (0, 1)")
        curve = self.alphas_for_curve
        if any(not 0.0 < a < 1.0 for a in curve) or any(b <= a for a, b in zip(curve, curve[1:])):
            raise InvalidConfig("alphas_for_curve must be strictly increasing within (0, 1)")
        if self.fqe.v0_mode not in ("expectation", "greedy"):
            raise InvalidConfig("fqe.v0_mode must be 'expectation' or 'greedy'")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        data = dict(data)
        seed = int(data.get("seed", 0))
        sections = {
            "input": InputConfig, "split": SplitSpec, "risk": RiskConfig,
            "policy": PolicyConfig, "fqe": FQEConfig, "audit": AuditConfig,
        }
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in sections and value is not None:
                kwargs[key] = _section(sections[key], key, value)
            elif key == "synth" and value is not None:
                synth = dict(value)
                synth.setdefault("seed", seed)
                kwargs[key] = SynthConfig.from_dict(synth)
            elif key in ("alphas_for_curve", "external_policies"):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None) -> "PipelineConfig":
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        if seed is not None:
            kwargs["seed"] = seed
            if self.synth is not None:
                kwargs["synth"] = SynthConfig(**{**_plain(self.synth), "seed": seed})
        if output_dir is not None:
            kwargs["output_dir"] = output_dir
        return PipelineConfig(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        return _plain(self)


def _section(kind, name: str, value: Mapping[str, Any]):
    known = {f.name for f in fields(kind)}
    extra = set(value) - known
    if extra:
        raise InvalidConfig(f"unknown keys in '{name}': {sorted(extra)}")
    value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    return kind(**value)


def _plain(obj: Any) -> Any:
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, Mapping):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def resolve_output_dir(cfg: PipelineConfig, cli_out: str | None = None) -> str:
    """CLI flag beats the environment variable, which beats the config file."""
    return cli_out or os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir


# --------------------------------------------------------------------------
# deterministic writers


def _clean(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _fmt(v: Any) -> Any:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# stages


class _Run:
    """Holds the output directory and the manifest entries as stages add files."""

    def __init__(self, out: Path) -> None:
        self.out = out
        self.entries: dict[str, dict[str, str]] = {}

    def record(self, section: str, name: str, rel: str) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        self.entries.setdefault(section, {})[name] = rel
        return path

    def stage(self, name: str, fn: Callable[[], Any]) -> Any:
        log.info("stage %s", name)
        try:
            return fn()
        except HacoError as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(name, exc) from exc
        except (ValueError, OSError, np.linalg.LinAlgError) as exc:
            raise StageError(name, exc) from exc

    def sections(self) -> dict:
        sections = {}
        for section, items in sorted(self.entries.items()):
            sections[section] = {
                name: {"path": rel, "sha256": sha256_file(self.out / rel)}
                for name, rel in sorted(items.items())
                if (self.out / rel).exists()
            }
        return sections

    def manifest(self, cfg: PipelineConfig, status: str, failed_stage: str | None = None) -> dict:
        sections = self.sections()
        cfg_dict = cfg.to_dict()
        cfg_dict.pop("output_dir", None)
        defaults = _plain(PipelineConfig(synth=SynthConfig()))
        defaults.pop("output_dir")
        out = {"status": status, "config": cfg_dict, "defaults": defaults, **sections}
        if failed_stage:
            out["failed_stage"] = failed_stage
        return out


def _load_data(cfg: PipelineConfig, threads: int) -> Dataset:
    if cfg.synth is not None:
        ds, _ = generate_dataset(cfg.synth, threads=threads)
        return ds
    inp = cfg.input
    ds = load_trajectories(inp.path, inp.format, inp.action_count)
    if inp.demographics:
        ds = merge_demographics(ds, list(inp.demographics))
    return ds


def _summary(ds: Dataset) -> LoadSummary:
    if ds.summary is not None:
        return ds.summary
    return LoadSummary(len(ds), 0, ds.n_episodes, len(set(ds.patient_id)), len(ds.feature_names))


def _safe_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    try:
        return auc(scores, labels)
    except DegenerateLabels:
        return None


def run_pipeline(cfg: PipelineConfig, threads: int = 1, output_dir: str | Path | None = None,
                 figures: bool = False) -> dict:
    """Run every stage, write all reports and return the manifest.

    On a stage failure the manifest is still written (``status: failed``)
    and the :class:`StageError` is re-raised.
    """
    out = Path(output_dir or resolve_output_dir(cfg))
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(out)
    current = {"stage": "data"}

    def stage(name, fn):
        current["stage"] = name
        return run.stage(name, fn)

    try:
        with threadpool_limits(limits=1):
            _execute(cfg, run, stage, threads)
            stage("plot_data", lambda: emit_plot_data(run.out, run))
            if figures:
                from .plots import render_figures

                stage("figures", lambda: render_figures(run.out, run))
    except StageError as exc:
        manifest = run.manifest(cfg, "failed", exc.stage)
        write_json(out / "manifest.json", manifest)
        raise
    manifest = run.manifest(cfg, "ok")
    write_json(out / "manifest.json", manifest)
    return manifest


def _execute(cfg: PipelineConfig, run: _Run, stage, threads: int) -> None:
    seed = cfg.seed

    ds = stage("data", lambda: _load_data(cfg, threads))
    write_json(run.record("artifacts", "load_summary", "load_summary.json"), _summary(ds).to_dict())

    train, calib, test = stage("split", lambda: temporal_split(ds, cfg.split))

    # risk model
    rc = cfg.risk
    model = stage("risk", lambda: fit_risk_model(
        train, rc.use_state, default_t_scale(train), rc.l2_lambda, rc.max_iter, rc.tol))
    model.save(run.record("models", "risk_model", "models/risk_model.json"))
    test_scores = score_dataset(model, test)
    calib_scores = score_dataset(model, calib)
    all_scores = score_dataset(model, ds)
    write_json(run.record("artifacts", "risk_metrics", "risk_metrics.json"), {
        "auc_test": _safe_auc(test_scores, test.harm),
        "auc_train": _safe_auc(score_dataset(model, train), train.harm),
        "n_train": len(train), "n_calib": len(calib), "n_test": len(test),
        "episodes": {"train": train.n_episodes, "calib": calib.n_episodes, "test": test.n_episodes},
        "harm_rate_train": float(train.harm.mean()),
        "feature_names": list(model.feature_names),
        "t_scale": model.t_scale,
    })

    # conformal gate
    cal = stage("calibrate", lambda: calibrate_threshold(calib_scores, cfg.alpha))
    report = cal.report()
    report["test_coverage"] = float(np.mean(test_scores <= cal.tau))
    report["test_safe_fraction"] = float(np.mean(gate_scores(test_scores, cal.tau)))
    write_json(run.record("artifacts", "calibration", "calibration.json"), report)
    write_csv(run.record("intermediate", "calib_scores", "intermediate/calib_scores.csv"),
              ["score"], ([s] for s in cal.scores_sorted))
    curve = stage("calibrate", lambda: coverage_curve(calib_scores, cfg.alphas_for_curve, test_scores))
    write_csv(run.record("artifacts", "coverage_curve", "coverage_curve.csv"),
              ["alpha", "tau", "safe_fraction"], curve)

    mask_all = gate_scores(all_scores, cal.tau)
    impact = stage("gate", lambda: safety_impact(ds.harm, mask_all))
    write_json(run.record("artifacts", "safety_impact", "safety_impact.json"),
               {"alpha": cfg.alpha, "tau": cal.tau, **impact.report()})

    # policies
    pc = cfg.policy
    t_scale = default_t_scale(train)
    train_scores = score_dataset(model, train)
    haco = stage("policy", lambda: fit_preference_policy(
        train, gate_scores(train_scores, cal.tau), pc.l2_lambda, pc.max_iter, pc.tol, t_scale))
    haco.save(run.record("models", "haco_policy", "models/haco_policy.json"))
    bc, bc_acc = stage("policy", lambda: fit_behavior_cloning(
        train, test, pc.l2_lambda, pc.max_iter, pc.tol, t_scale))
    bc.save(run.record("models", "bc_policy", "models/bc_policy.json"))
    write_json(run.record("artifacts", "bc_metrics", "bc_metrics.json"), {
        "test_accuracy": bc_acc,
        "chance_level": 1.0 / ds.action_count,
        "n_train_steps": len(train),
        "n_test_steps": len(test),
    })

    # FQE on a stratified subset of the full data
    fc = cfg.fqe
    ords = stratified_episodes(ds, fc.subset_rows, seed)
    sub_idx = ds.step_indices(ords)
    sub = ds.select_episodes(ords)
    policies: list[tuple[str, Any]] = [("haco", haco), ("bc", bc)]
    for path in cfg.external_policies:
        ext = StepTablePolicy.read_csv(path)
        policies.append((ext.name, StepTablePolicy(ext.step_probs(ds)[sub_idx], ext.name)))

    def evaluate(policy):
        q = fit_fqe(sub, policy, fc.gamma, fc.ridge_lambda, fc.max_iters, fc.tol,
                    fc.include_time, t_scale)
        return q, estimate_v0(q, sub, policy, fc.v0_mode)

    reports = []
    for name, policy in policies:
        q, res = stage("fqe", lambda: evaluate(policy))
        reports.append(res.report(q, name))
    write_json(run.record("artifacts", "fqe_report", "fqe_report.json"), {
        "subset_rows": len(sub), "subset_episodes": sub.n_episodes, "policies": reports})

    # value versus alpha
    rows = []
    for a in cfg.alphas_for_curve:
        cal_a = calibrate_threshold(calib_scores, a)
        mask_a = gate_scores(train_scores, cal_a.tau)
        try:
            pol = fit_preference_policy(train, mask_a, pc.l2_lambda, pc.max_iter, pc.tol, t_scale)
        except (EmptySafeSet, SingleActionSafeSet):
            rows.append((a, cal_a.tau, float(mask_a.mean()), None))
            continue
        _, res = stage("fqe", lambda: evaluate(pol))
        rows.append((a, cal_a.tau, float(mask_a.mean()), res.v0))
    write_csv(run.record("intermediate", "value_vs_alpha", "intermediate/value_vs_alpha.csv"),
              ["alpha", "tau", "train_safe_fraction", "v0"], rows)
    quart = length_quartiles(ds)[ds.episode_index]
    write_csv(run.record("intermediate", "step_actions", "intermediate/step_actions.csv"),
              ["action", "length_quartile"], zip(ds.action.tolist(), quart.tolist()))

    # audit
    ac = cfg.audit
    returns = audit_mod.episode_returns(ds, ac.gamma)
    summaries = stage("audit", lambda: audit_mod.subgroup_audit(
        ds, returns, ac.B_ci, ac.B_p, seed, threads=threads))
    _write_audit(run.record("artifacts", "subgroup_audit", "subgroup_audit.csv"), summaries)
    bins = stage("audit", lambda: audit_mod.subgroup_calibration(calib, calib_scores, ac.bins, ac.z))
    write_csv(run.record("artifacts", "calibration_bins", "calibration_bins.csv"),
              ["group", "level", "bin", "mean_predicted", "observed", "n", "wilson_low", "wilson_high"],
              ((g, lvl, b.bin_index, b.mean_predicted, b.observed_rate, b.n, b.wilson_low,
                b.wilson_high) for g, lvl, b in bins))


def _write_audit(path: Path, summaries) -> None:
    write_csv(path, ["group", "level", "n", "mean", "ci_low", "ci_high", "reference", "p_value", "cohens_d"],
              ((s.group, s.level, s.n, s.mean, s.ci_low, s.ci_high, s.reference_level,
                s.p_value, s.cohens_d) for s in summaries))


def run_audit(
    dataset: str | Path,
    policy: str | Path,
    demographics: list[str] | tuple[str, ...] = (),
    out: str | Path | None = None,
    config: str | Path | None = None,
    seed: int = 0,
    threads: int = 1,
    action_count: int = 9,
) -> dict:
    """Audit-only mode: evaluate one policy on a logged dataset and audit
    its per-episode value, and the logged returns, across subgroups.

    FQE and audit settings come from ``config`` when given, else defaults.
    """
    if config is not None:
        with open(config, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        fc = _section(FQEConfig, "fqe", raw.get("fqe") or {})
        ac = _section(AuditConfig, "audit", raw.get("audit") or {})
    else:
        fc, ac = FQEConfig(), AuditConfig()
    out = Path(out or os.environ.get(OUTPUT_DIR_ENV) or "haco_audit")
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(out)
    settings = {"dataset": str(dataset), "policy": str(policy), "demographics": list(demographics),
                "fqe": _plain(fc), "audit": _plain(ac), "seed": seed}

    def finish(status: str, failed: str | None = None) -> dict:
        manifest = {"status": status, "config": settings, **run.sections()}
        if failed:
            manifest["failed_stage"] = failed
        write_json(out / "manifest.json", manifest)
        return manifest

    try:
        with threadpool_limits(limits=1):
            ds = run.stage("data", lambda: load_trajectories(dataset, None, action_count))
            if demographics:
                ds = run.stage("data", lambda: merge_demographics(ds, list(demographics)))
            write_json(run.record("artifacts", "load_summary", "load_summary.json"), _summary(ds).to_dict())
            pol = run.stage("policy", lambda: load_policy(policy))

            def evaluate():
                q = fit_fqe(ds, pol, fc.gamma, fc.ridge_lambda, fc.max_iters, fc.tol, fc.include_time)
                return q, estimate_v0(q, ds, pol, fc.v0_mode)

            q, res = run.stage("fqe", evaluate)
            name = getattr(pol, "name", type(pol).__name__)
            write_json(run.record("artifacts", "fqe_report", "fqe_report.json"), res.report(q, name))
            write_csv(run.record("artifacts", "episode_values", "episode_values.csv"),
                      ["episode_id", "patient_id", "v0", "logged_return"],
                      zip(ds.episode_id[ds.episode_bounds[:, 0]].tolist(), ds.episode_patients,
                          res.per_episode_v0.tolist(),
                          audit_mod.episode_returns(ds, ac.gamma).tolist()))
            values = run.stage("audit", lambda: audit_mod.subgroup_audit(
                ds, res.per_episode_v0, ac.B_ci, ac.B_p, seed, threads=threads))
            _write_audit(run.record("artifacts", "subgroup_audit", "subgroup_audit.csv"), values)
            logged = run.stage("audit", lambda: audit_mod.subgroup_audit(
                ds, audit_mod.episode_returns(ds, ac.gamma), ac.B_ci, ac.B_p, seed, threads=threads))
            _write_audit(run.record("artifacts", "logged_return_audit", "logged_return_audit.csv"), logged)
    except StageError as exc:
        finish("failed", exc.stage)
        raise
    return finish("ok")


# --------------------------------------------------------------------------
# plot data


def _need(out: Path, rel: str) -> Path:
    path = out / rel
    if not path.exists():
        raise MissingStageOutput(f"missing stage output {rel}")
    return path


def emit_plot_data(out: str | Path, run: _Run | None = None) -> dict[str, str]:
    """Write the CSVs needed to redraw every figure from a completed run directory."""
    out = Path(out)
    tau = json.loads(_need(out, "calibration.json").read_text())["tau"]
    scores = np.array([float(r["score"]) for r in read_csv(_need(out, "intermediate/calib_scores.csv"))])
    curve = read_csv(_need(out, "coverage_curve.csv"))
    bins = read_csv(_need(out, "calibration_bins.csv"))
    actions = read_csv(_need(out, "intermediate/step_actions.csv"))
    value = read_csv(_need(out, "intermediate/value_vs_alpha.csv"))

    def target(name: str) -> Path:
        rel = f"plot_data/{name}.csv"
        if run is not None:
            return run.record("plot_data", name, rel)
        (out / "plot_data").mkdir(exist_ok=True)
        return out / rel

    written = {}
    scores = np.sort(scores)
    uniq = np.unique(scores)
    cum = np.searchsorted(scores, uniq, side="right") / len(scores)
    path = target("calibration_cdf")
    write_csv(path, ["score", "cumulative_fraction", "is_tau"],
              ((s, c, s == tau) for s, c in zip(uniq, cum)))
    written["calibration_cdf"] = str(path)

    path = target("coverage_vs_alpha")
    write_csv(path, ["alpha", "tau", "safe_fraction"],
              ((r["alpha"], r["tau"], r["safe_fraction"]) for r in curve))
    written["coverage_vs_alpha"] = str(path)

    path = target("calibration_by_subgroup")
    write_csv(path, list(bins[0].keys()) if bins else ["group"], (list(r.values()) for r in bins))
    written["calibration_by_subgroup"] = str(path)

    a = np.array([int(r["action"]) for r in actions])
    qk = np.array([int(r["length_quartile"]) for r in actions])
    n_actions = int(a.max()) + 1
    hist = [("overall", "all", k, int(np.sum(a == k))) for k in range(n_actions)]
    for quart in range(4):
        for k in range(n_actions):
            hist.append(("length_quartile", str(quart), k, int(np.sum((a == k) & (qk == quart)))))
    path = target("action_histogram")
    write_csv(path, ["scope", "stratum", "action", "count"], hist)
    written["action_histogram"] = str(path)

    path = target("value_vs_alpha")
    write_csv(path, ["alpha", "tau", "train_safe_fraction", "v0"],
              ((r["alpha"], r["tau"], r["train_safe_fraction"], r["v0"]) for r in value))
    written["value_vs_alpha"] = str(path)
    return written
