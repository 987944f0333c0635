"""Deterministic simulation of straggler mitigation in distributed training.

The package models parameter-server and ring all-reduce training jobs on a
shared cluster, forecasts per-worker iteration times from resource-share
history, and switches synchronization modes (group size, cluster barriers,
ring removal with a bounded wait window) to maximize statistically adjusted
throughput. Includes resource-aware straggler prevention, learning-rate
rescaling, baseline policies, and a CLI.
"""

from .domain import (
    ALL_REDUCE,
    PS,
    STRAGGLER_THRESHOLD,
    ARRemoval,
    Cluster,
    ClusterPartition,
    DomainError,
    DynamicX,
    IterationRecord,
    JobSpec,
    ModelProfile,
    PgnsCurve,
    SensitivityProfile,
    ServerSpec,
    StaticX,
    SyncMode,
    WorldSpec,
    WorldValidationError,
    asgd_mode,
    effective_batch,
    mode_label,
    pgns_at_step,
    ssgd_mode,
    validate_world,
)
from .resources import (
    DemandSet,
    InfeasibleTarget,
    PhaseBreakdown,
    StarvedShare,
    invert_phase,
    maxmin_allocate,
    phase_durations,
)
from .predictor import (
    HistoryWindow,
    OnlineTimeRegressor,
    ShareForecaster,
    classify_stragglers,
    deviation_stats,
    predict_iteration_time,
)
from .decisions import (
    ALL_POLICIES,
    DecisionSnapshot,
    ModeCandidate,
    ModeRegressor,
    RegressorDataset,
    baseline_policy_step,
    cluster_by_time,
    mode_learning_rates,
    rank_mode_candidates,
    rank_mode_candidates_ml,
    scale_learning_rate,
    select_mode_heuristic,
    select_mode_ml,
    time_allreduce,
    time_dynamic,
    time_static_x,
    train_mode_regressor,
)
from .prevention import (
    BeneficiaryNeed,
    CommTree,
    GroupPeer,
    PlacementError,
    ReallocationPlan,
    RingPeer,
    ServerLoad,
    VictimTask,
    assign_child_parent,
    build_comm_tree,
    place_high_load_task,
    plan_reallocation,
    sensitivity_weighted_split,
    slack_from_fast_peers,
)
from .engine import (
    EngineConfig,
    MarkovSpec,
    Perturbation,
    compile_perturbations,
    run_simulation,
)
from .metrics import (
    JobMetrics,
    PredictionQuality,
    RunMetrics,
    UpdateRecord,
    finalize_straggler_flags,
    fixed_rule_flags,
    prediction_quality,
    replay_progress,
    straggler_iteration_count,
)
from .io import (
    load_perturbations,
    load_trace,
    load_world,
    metrics_rows_csv,
    parse_trace,
    run_from_json,
    run_to_json,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_POLICIES",
    "ALL_REDUCE",
    "ARRemoval",
    "BeneficiaryNeed",
    "Cluster",
    "ClusterPartition",
    "CommTree",
    "DecisionSnapshot",
    "DemandSet",
    "DomainError",
    "DynamicX",
    "EngineConfig",
    "GroupPeer",
    "HistoryWindow",
    "InfeasibleTarget",
    "IterationRecord",
    "JobMetrics",
    "JobSpec",
    "MarkovSpec",
    "ModeCandidate",
    "ModeRegressor",
    "ModelProfile",
    "OnlineTimeRegressor",
    "PS",
    "Perturbation",
    "PgnsCurve",
    "PhaseBreakdown",
    "PlacementError",
    "PredictionQuality",
    "ReallocationPlan",
    "RegressorDataset",
    "RingPeer",
    "RunMetrics",
    "STRAGGLER_THRESHOLD",
    "SensitivityProfile",
    "ServerLoad",
    "ServerSpec",
    "ShareForecaster",
    "StarvedShare",
    "StaticX",
    "SyncMode",
    "UpdateRecord",
    "VictimTask",
    "WorldSpec",
    "WorldValidationError",
    "asgd_mode",
    "assign_child_parent",
    "baseline_policy_step",
    "build_comm_tree",
    "classify_stragglers",
    "cluster_by_time",
    "compile_perturbations",
    "deviation_stats",
    "effective_batch",
    "finalize_straggler_flags",
    "fixed_rule_flags",
    "invert_phase",
    "load_perturbations",
    "load_trace",
    "load_world",
    "maxmin_allocate",
    "metrics_rows_csv",
    "mode_label",
    "mode_learning_rates",
    "parse_trace",
    "pgns_at_step",
    "phase_durations",
    "place_high_load_task",
    "plan_reallocation",
    "predict_iteration_time",
    "prediction_quality",
    "rank_mode_candidates",
    "rank_mode_candidates_ml",
    "replay_progress",
    "run_from_json",
    "run_simulation",
    "run_to_json",
    "scale_learning_rate",
    "select_mode_heuristic",
    "select_mode_ml",
    "sensitivity_weighted_split",
    "slack_from_fast_peers",
    "ssgd_mode",
    "straggler_iteration_count",
    "time_allreduce",
    "time_dynamic",
    "time_static_x",
    "train_mode_regressor",
    "validate_world",
]
