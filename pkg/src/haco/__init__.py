"""Conformal harm gating, offline policies, fitted-Q evaluation and
subgroup auditing for logged decision trajectories."""

from .audit import (
    bootstrap_ci,
    bootstrap_pvalue,
    calibration_bins,
    cohens_d,
    episode_returns,
    episodic_return,
    subgroup_audit,
    subgroup_calibration,
    wilson_interval,
)
from .conformal import (
    CalibrationResult,
    SafetyImpact,
    apply_gate,
    calibrate_threshold,
    coverage_curve,
    gate_scores,
    safety_impact,
)
from .errors import HacoError, StageError
from .fqe import FQEResult, LinearQ, estimate_v0, fit_fqe, stratified_subset
from .pipeline import PipelineConfig, emit_plot_data, run_audit, run_pipeline
from .policy import (
    SoftmaxPolicy,
    StateTablePolicy,
    StepTablePolicy,
    UniformPolicy,
    fit_behavior_cloning,
    fit_preference_policy,
    load_policy,
)
from .risk_model import RiskModel, auc, fit_logistic, fit_risk_model, predict_harm, score_dataset
from .synth import (
    GroundTruthMDP,
    SynthConfig,
    TabularMDP,
    generate_dataset,
    generate_tabular_dataset,
    true_policy_value,
)
from .trajectory_store import (
    Dataset,
    Demographics,
    SplitSpec,
    load_trajectories,
    merge_demographics,
    temporal_split,
    write_trajectories,
)

__version__ = "0.1.0"

__all__ = [
    "bootstrap_ci",
    "bootstrap_pvalue",
    "calibration_bins",
    "cohens_d",
    "episode_returns",
    "episodic_return",
    "subgroup_audit",
    "subgroup_calibration",
    "wilson_interval",
    "CalibrationResult",
    "SafetyImpact",
    "apply_gate",
    "calibrate_threshold",
    "coverage_curve",
    "gate_scores",
    "safety_impact",
    "HacoError",
    "StageError",
    "FQEResult",
    "LinearQ",
    "estimate_v0",
    "fit_fqe",
    "stratified_subset",
    "PipelineConfig",
    "emit_plot_data",
    "run_audit",
    "run_pipeline",
    "SoftmaxPolicy",
    "StateTablePolicy",
    "StepTablePolicy",
    "UniformPolicy",
    "fit_behavior_cloning",
    "fit_preference_policy",
    "load_policy",
    "RiskModel",
    "auc",
    "fit_logistic",
    "fit_risk_model",
    "predict_harm",
    "score_dataset",
    "GroundTruthMDP",
    "SynthConfig",
    "TabularMDP",
    "generate_dataset",
    "generate_tabular_dataset",
    "true_policy_value",
    "Dataset",
    "Demographics",
    "SplitSpec",
    "load_trajectories",
    "merge_demographics",
    "temporal_split",
    "write_trajectories",
]
