"""Synchronization-mode selection.

Given per-worker predicted iteration times, the selector estimates the time
per unit progress of every candidate mode and picks the argmin:

* ``StaticX(x)``: each update waits for x gradients; the update interval is
  the x-th smallest predicted time and the per-update progress shrinks with
  the pooled batch x * M / N.
* ``DynamicX``: workers are partitioned into clusters of similar speed, each
  with its own barrier; cluster rates add.
* ``ARRemoval(x, t_w)``: ring all-reduce with the x slowest workers removed;
  parents wait t_w for child gradients after the ring finishes.

Progress per update with batch b is 1 / (1 + phi / b), so each estimator
multiplies its update interval by (1 + phi / b). A trained regressor can
replace the closed-form estimates for models with no efficiency calibration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .domain import (
    ALL_REDUCE,
    PS,
    STRAGGLER_THRESHOLD,
    ARRemoval,
    Cluster,
    ClusterPartition,
    DomainError,
    DynamicX,
    StaticX,
    SyncMode,
    mode_label,
)
from .predictor import deviation_stats, predicted_straggler_set

#: Parent wait grid swept by the all-reduce selector, seconds.
DEFAULT_TW_GRID = tuple(round(0.030 * k, 3) for k in range(1, 8))

#: Fewest dataset rows before the regressor is considered trained.
MIN_TRAINING_ROWS = 200

#: Wall-clock cost of one heuristic decision, seconds.
DEFAULT_DECISION_LATENCY = 0.970


def cluster_by_time(
    times: Sequence[float], threshold: float = STRAGGLER_THRESHOLD
) -> ClusterPartition:
    """Group workers by predicted time, complete-linkage agglomeration.

    Distance is absolute time difference. A merge is allowed only while the
    merged cluster stays tight: (max - min) / min must not exceed the
    straggler threshold. Among allowed merges the closest pair merges first.
    Clusters come back ordered by their slowest member, which is also the
    cluster's representative time (the barrier waits for it).
    """
    if not times:
        raise DomainError("cannot cluster an empty time list")
    if any(t <= 0.0 for t in times):
        raise DomainError("iteration times must be positive")
    clusters: list[tuple[float, float, tuple[int, ...]]] = [
        (float(t), float(t), (i,)) for i, t in enumerate(times)
    ]
    while len(clusters) > 1:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                lo = min(clusters[a][0], clusters[b][0])
                hi = max(clusters[a][1], clusters[b][1])
                linkage = hi - lo  # complete linkage on a line is the union span
                if (hi - lo) / lo > threshold:
                    continue
                key = (linkage, lo, min(clusters[a][2] + clusters[b][2]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        if best is None:
            break
        _, a, b = best
        lo = min(clusters[a][0], clusters[b][0])
        hi = max(clusters[a][1], clusters[b][1])
        members = tuple(sorted(clusters[a][2] + clusters[b][2]))
        replacement = (lo, hi, members)
        clusters = [c for i, c in enumerate(clusters) if i not in (a, b)]
        clusters.append(replacement)
    ordered = sorted(clusters, key=lambda c: (c[1], c[2]))
    return ClusterPartition(
        clusters=tuple(Cluster(workers=c[2], t_ci=c[1]) for c in ordered)
    )


def time_static_x(
    x: int, num_workers: int, total_batch: float, phi: float, times: Sequence[float]
) -> float:
    """Estimated seconds per unit progress for StaticX(x).

    The update interval is the x-th smallest predicted time: by then x
    gradients have arrived. Deferred reports from slower workers are ignored
    by this estimate on purpose; the engine models them.
    """
    if not 1 <= x <= num_workers:
        raise DomainError("x must lie in [1, num_workers]")
    if len(times) != num_workers:
        raise DomainError("need one predicted time per worker")
    t_x = sorted(times)[x - 1]
    batch = x * total_batch / num_workers
    return (1.0 + phi / batch) * t_x


def time_dynamic(
    partition: ClusterPartition, num_workers: int, total_batch: float, phi: float
) -> float:
    """Estimated seconds per unit progress for DynamicX over ``partition``.

    Each cluster updates independently at its own barrier, so the cluster
    progress rates add and the aggregate time is the reciprocal of the sum.
    """
    if partition.num_workers != num_workers:
        raise DomainError("partition must cover every worker")
    rate = 0.0
    for cluster in partition.clusters:
        batch = cluster.n_ci * total_batch / num_workers
        rate += 1.0 / ((1.0 + phi / batch) * cluster.t_ci)
    return 1.0 / rate


def time_allreduce(
    x: int,
    t_w: float,
    num_workers: int,
    total_batch: float,
    phi: float,
    times: Sequence[float],
    ring: Sequence[int] | None = None,
) -> float:
    """Estimated seconds per unit progress for ARRemoval(x, t_w).

    The ring round takes the slowest retained worker's time plus the parent
    wait. A removed worker's gradient still counts when its predicted
    completion fits inside the round, i.e. within t_ring + t_w.
    """
    if not 0 <= x < num_workers:
        raise DomainError("x must leave at least one ring worker")
    if len(times) != num_workers:
        raise DomainError("need one predicted time per worker")
    if ring is None:
        order = sorted(range(num_workers), key=lambda i: (times[i], i))
        ring_set = set(order[: num_workers - x])
    else:
        ring_set = set(ring)
        if len(ring_set) != num_workers - x:
            raise DomainError("ring membership must have exactly N - x workers")
    t_ring = max(times[i] for i in ring_set)
    deadline = t_ring + t_w
    q = sum(1 for i in range(num_workers) if i not in ring_set and times[i] <= deadline)
    batch = (num_workers - x + q) * total_batch / num_workers
    return (1.0 + phi / batch) * (t_ring + t_w)


@dataclass(frozen=True)
class DecisionSnapshot:
    """Everything a selector sees at one decision point."""

    predicted_times: tuple[float, ...]
    max_deviation_ratio: float
    model_id: str
    learning_rate: float
    completed_steps: int
    num_workers: int
    total_batch: float
    architecture: str
    phi: float

    @classmethod
    def from_predictions(
        cls,
        predicted_times: Sequence[float],
        model_id: str,
        learning_rate: float,
        completed_steps: int,
        total_batch: float,
        architecture: str,
        phi: float,
    ) -> "DecisionSnapshot":
        stats = deviation_stats(predicted_times)
        return cls(
            predicted_times=tuple(float(t) for t in predicted_times),
            max_deviation_ratio=stats.spread_ratio,
            model_id=model_id,
            learning_rate=float(learning_rate),
            completed_steps=int(completed_steps),
            num_workers=len(predicted_times),
            total_batch=float(total_batch),
            architecture=architecture,
            phi=float(phi),
        )


@dataclass(frozen=True)
class ModeCandidate:
    """A candidate mode with its estimated seconds per unit progress."""

    mode: SyncMode
    est_time: float


def _tie_break_key(candidate: ModeCandidate) -> tuple:
    # Equal estimates prefer the more synchronous choice: larger x first,
    # StaticX ahead of DynamicX, then the smaller parent wait.
    mode = candidate.mode
    if isinstance(mode, StaticX):
        return (candidate.est_time, 0, -mode.x, 0.0)
    if isinstance(mode, DynamicX):
        return (candidate.est_time, 1, 0, 0.0)
    return (candidate.est_time, 0, -mode.x, mode.t_w)


def rank_mode_candidates(
    snapshot: DecisionSnapshot,
    tw_grid: Sequence[float] = DEFAULT_TW_GRID,
    threshold: float = STRAGGLER_THRESHOLD,
) -> list[ModeCandidate]:
    """All candidate modes ranked best-first.

    Parameter-server jobs enumerate StaticX(1..N) plus one DynamicX built
    from time clustering (skipped when clustering yields a single cluster:
    that partition is definitionally StaticX(N)). All-reduce jobs enumerate
    removal counts from zero up to the predicted straggler count crossed
    with the parent-wait grid.
    """
    times = snapshot.predicted_times
    n = snapshot.num_workers
    m = snapshot.total_batch
    phi = snapshot.phi
    candidates: list[ModeCandidate] = []
    if snapshot.architecture == PS:
        for x in range(1, n + 1):
            candidates.append(
                ModeCandidate(StaticX(x), time_static_x(x, n, m, phi, times))
            )
        partition = cluster_by_time(times, threshold)
        if len(partition.clusters) > 1:
            candidates.append(
                ModeCandidate(DynamicX(partition), time_dynamic(partition, n, m, phi))
            )
    elif snapshot.architecture == ALL_REDUCE:
        stragglers = predicted_straggler_set(times, threshold)
        candidates.append(
            ModeCandidate(ARRemoval(0, 0.0), time_allreduce(0, 0.0, n, m, phi, times))
        )
        for x in range(1, len(stragglers) + 1):
            for t_w in tw_grid:
                candidates.append(
                    ModeCandidate(
                        ARRemoval(x, t_w), time_allreduce(x, t_w, n, m, phi, times)
                    )
                )
    else:
        raise DomainError(f"unknown architecture {snapshot.architecture!r}")
    candidates.sort(key=_tie_break_key)
    return candidates


def select_mode_heuristic(
    snapshot: DecisionSnapshot,
    tw_grid: Sequence[float] = DEFAULT_TW_GRID,
    threshold: float = STRAGGLER_THRESHOLD,
) -> ModeCandidate:
    """Best candidate by the closed-form estimates."""
    return rank_mode_candidates(snapshot, tw_grid, threshold)[0]


def scale_learning_rate(rate_ssgd: float, reports: int, num_workers: int) -> float:
    """Learning rate for an update built from ``reports`` of N gradients.

    The rate scales with the effective batch: reports / N of the fully
    synchronous rate.
    """
    if reports < 1 or reports > num_workers:
        raise DomainError("reports must lie in [1, num_workers]")
    return rate_ssgd * reports / num_workers


def mode_learning_rates(
    mode: SyncMode, num_workers: int, rate_ssgd: float, q: int = 0
) -> float | tuple[float, ...]:
    """Learning rate(s) implied by a mode; DynamicX yields one per cluster."""
    if isinstance(mode, StaticX):
        return scale_learning_rate(rate_ssgd, mode.x, num_workers)
    if isinstance(mode, DynamicX):
        return tuple(
            scale_learning_rate(rate_ssgd, c.n_ci, num_workers)
            for c in mode.partition.clusters
        )
    if isinstance(mode, ARRemoval):
        return scale_learning_rate(rate_ssgd, num_workers - mode.x + q, num_workers)
    raise DomainError(f"unknown mode {mode!r}")


# --- learned selector ------------------------------------------------------

STATIC_FAMILY = "static"
DYNAMIC_FAMILY = "dynamic"
AR_FAMILY = "ar-removal"


@dataclass(frozen=True)
class RegressorRow:
    """One training example: a decision snapshot, a candidate, its outcome."""

    snapshot: DecisionSnapshot
    family: str
    x: int
    t_w: float
    label: float  # realized seconds per unit progress under the candidate


@dataclass
class RegressorDataset:
    """Append-only training set for the learned selector."""

    rows: list[RegressorRow] = field(default_factory=list)

    def add(self, snapshot: DecisionSnapshot, mode: SyncMode, label: float) -> None:
        if label <= 0.0 or not math.isfinite(label):
            raise DomainError("labels must be finite positive durations")
        if isinstance(mode, StaticX):
            family, x, t_w = STATIC_FAMILY, mode.x, 0.0
        elif isinstance(mode, DynamicX):
            family, x, t_w = DYNAMIC_FAMILY, 0, 0.0
        elif isinstance(mode, ARRemoval):
            family, x, t_w = AR_FAMILY, mode.x, mode.t_w
        else:
            raise DomainError(f"unknown mode {mode!r}")
        self.rows.append(RegressorRow(snapshot, family, x, t_w, float(label)))

    def __len__(self) -> int:
        return len(self.rows)


def _static_features(snapshot: DecisionSnapshot, x: int) -> dict[str, float]:
    t_x = sorted(snapshot.predicted_times)[x - 1]
    interval = t_x
    batch = x * snapshot.total_batch / snapshot.num_workers
    return {
        "interval": interval,
        "interval_per_batch": interval / batch,
        "interval_per_batch_steps": interval / batch * snapshot.completed_steps * 1e-4,
        "max_dev": snapshot.max_deviation_ratio,
        "lr": snapshot.learning_rate,
        "bias": 1.0,
        f"model={snapshot.model_id}": 1.0,
    }


def _ar_features(snapshot: DecisionSnapshot, x: int, t_w: float) -> dict[str, float]:
    times = snapshot.predicted_times
    n = snapshot.num_workers
    order = sorted(range(n), key=lambda i: (times[i], i))
    ring = order[: n - x]
    t_ring = max(times[i] for i in ring)
    deadline = t_ring + t_w
    removed = order[n - x :]
    q = sum(1 for i in removed if times[i] <= deadline)
    interval = t_ring + t_w
    batch = (n - x + q) * snapshot.total_batch / n
    return {
        "interval": interval,
        "interval_per_batch": interval / batch,
        "interval_per_batch_steps": interval / batch * snapshot.completed_steps * 1e-4,
        "max_dev": snapshot.max_deviation_ratio,
        "lr": snapshot.learning_rate,
        "bias": 1.0,
        f"model={snapshot.model_id}": 1.0,
    }


def _dynamic_features(snapshot: DecisionSnapshot, threshold: float) -> dict[str, float]:
    # Cluster rates add, so the dynamic family regresses in rate space:
    # 1/T is linear in per-cluster-size sums of reciprocal times.
    partition = cluster_by_time(snapshot.predicted_times, threshold)
    features: dict[str, float] = {
        "bias": 1.0,
        "max_dev": snapshot.max_deviation_ratio,
        "lr": snapshot.learning_rate,
        f"model={snapshot.model_id}": 1.0,
    }
    for cluster in partition.clusters:
        per_batch = cluster.n_ci * snapshot.total_batch / snapshot.num_workers
        key = f"rate_n{cluster.n_ci}"
        features[key] = features.get(key, 0.0) + 1.0 / cluster.t_ci
        key_b = f"rate_per_batch_n{cluster.n_ci}"
        features[key_b] = features.get(key_b, 0.0) + 1.0 / (cluster.t_ci * per_batch)
    return features


def candidate_features(
    snapshot: DecisionSnapshot,
    mode: SyncMode,
    threshold: float = STRAGGLER_THRESHOLD,
) -> dict[str, float]:
    """Feature map used by the learned selector, derived from raw snapshot."""
    if isinstance(mode, StaticX):
        return _static_features(snapshot, mode.x)
    if isinstance(mode, ARRemoval):
        return _ar_features(snapshot, mode.x, mode.t_w)
    if isinstance(mode, DynamicX):
        return _dynamic_features(snapshot, threshold)
    raise DomainError(f"unknown mode {mode!r}")


class _FamilyModel:
    """Least-squares linear model over named feature columns."""

    def __init__(self, names: list[str], coef: np.ndarray, lo: np.ndarray, hi: np.ndarray, rate_space: bool):
        self.names = names
        self.coef = coef
        self.lo = lo
        self.hi = hi
        self.rate_space = rate_space

    @classmethod
    def fit(cls, feature_rows: list[dict[str, float]], labels: list[float], rate_space: bool) -> "_FamilyModel":
        names = sorted({name for row in feature_rows for name in row})
        design = np.asarray(
            [[row.get(name, 0.0) for name in names] for row in feature_rows], dtype=float
        )
        target = np.asarray(labels, dtype=float)
        if rate_space:
            target = 1.0 / target
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        return cls(names, coef, design.min(axis=0), design.max(axis=0), rate_space)

    def predict(self, features: dict[str, float]) -> float:
        row = np.asarray([features.get(name, 0.0) for name in self.names], dtype=float)
        # Features outside the training range are clamped to it, so an
        # adversarial snapshot still yields a finite, in-distribution value.
        row = np.minimum(np.maximum(row, self.lo), self.hi)
        value = float(row @ self.coef)
        if self.rate_space:
            if value <= 0.0:
                return math.inf
            return 1.0 / value
        return value


class ModeRegressor:
    """One linear model per candidate-mode family."""

    def __init__(self, families: dict[str, _FamilyModel], threshold: float):
        self._families = families
        self._threshold = threshold

    @property
    def families(self) -> tuple[str, ...]:
        return tuple(sorted(self._families))

    def supports(self, architecture: str) -> bool:
        if architecture == PS:
            return STATIC_FAMILY in self._families
        return AR_FAMILY in self._families

    def predict(self, snapshot: DecisionSnapshot, mode: SyncMode) -> float:
        if isinstance(mode, StaticX):
            family = STATIC_FAMILY
        elif isinstance(mode, DynamicX):
            family = DYNAMIC_FAMILY
        elif isinstance(mode, ARRemoval):
            family = AR_FAMILY
        else:
            raise DomainError(f"unknown mode {mode!r}")
        model = self._families.get(family)
        if model is None:
            return math.inf
        return model.predict(candidate_features(snapshot, mode, self._threshold))


def train_mode_regressor(
    dataset: RegressorDataset,
    min_rows: int = MIN_TRAINING_ROWS,
    threshold: float = STRAGGLER_THRESHOLD,
) -> ModeRegressor | None:
    """Fit the per-family models; None while the dataset is too small."""
    if len(dataset) < min_rows:
        return None
    grouped: dict[str, tuple[list[dict[str, float]], list[float]]] = {}
    for row in dataset.rows:
        if row.family == STATIC_FAMILY:
            mode: SyncMode = StaticX(row.x)
        elif row.family == DYNAMIC_FAMILY:
            mode = DynamicX(cluster_by_time(row.snapshot.predicted_times, threshold))
        else:
            mode = ARRemoval(row.x, row.t_w)
        features = candidate_features(row.snapshot, mode, threshold)
        rows, labels = grouped.setdefault(row.family, ([], []))
        rows.append(features)
        labels.append(row.label)
    families = {
        family: _FamilyModel.fit(rows, labels, rate_space=(family == DYNAMIC_FAMILY))
        for family, (rows, labels) in grouped.items()
    }
    return ModeRegressor(families, threshold)


def rank_mode_candidates_ml(
    regressor: ModeRegressor,
    snapshot: DecisionSnapshot,
    tw_grid: Sequence[float] = DEFAULT_TW_GRID,
    threshold: float = STRAGGLER_THRESHOLD,
) -> list[ModeCandidate]:
    """Candidates ranked by the learned estimates, heuristic tie-breaking."""
    ranked = rank_mode_candidates(snapshot, tw_grid, threshold)
    rescored = [
        ModeCandidate(c.mode, regressor.predict(snapshot, c.mode)) for c in ranked
    ]
    rescored.sort(key=_tie_break_key)
    return rescored


def select_mode_ml(
    regressor: ModeRegressor | None,
    snapshot: DecisionSnapshot,
    tw_grid: Sequence[float] = DEFAULT_TW_GRID,
    threshold: float = STRAGGLER_THRESHOLD,
) -> ModeCandidate | None:
    """Best candidate by the learned models; None signals not-ready."""
    if regressor is None or not regressor.supports(snapshot.architecture):
        return None
    return rank_mode_candidates_ml(regressor, snapshot, tw_grid, threshold)[0]


# --- decision timing and baseline policies ---------------------------------

TimingVariant = Literal["pause", "overlap", "lookahead"]


@dataclass(frozen=True)
class DecisionTiming:
    """How decision latency interacts with training.

    ``pause`` blocks updates for the latency, ``overlap`` hides it entirely,
    ``lookahead`` hides it by deciding early on predictions that are one
    round stale.
    """

    variant: TimingVariant = "pause"
    latency: float = DEFAULT_DECISION_LATENCY


BASELINE_POLICIES = ("ssgd", "asgd", "sync-switch", "lb-bsp", "lgc")
ADAPTIVE_POLICIES = ("adaptive-h", "adaptive-ml", "adaptive-early")
ALL_POLICIES = BASELINE_POLICIES + ADAPTIVE_POLICIES + tuple(
    f"static-{x}" for x in (1, 2, 4, 8)
)

#: Ring workers kept by the gradient-coding baseline.
LGC_KEEP = 5

#: Wall seconds a straggler must persist before the switching baseline reacts.
SYNC_SWITCH_PERSIST_S = 5.0

#: Consecutive qualifying rounds before the batch balancer adjusts.
LB_BSP_ROUNDS = 8

#: Samples moved per batch adjustment.
LB_BSP_DELTA = 32


@dataclass(frozen=True)
class PolicyObservation:
    """Realized history summary handed to a baseline policy."""

    num_workers: int
    architecture: str
    straggler_streak_s: tuple[float, ...]
    extreme_pair_run: int
    fastest_worker: int | None
    slowest_worker: int | None
    lgc_t_w: float = 0.060


@dataclass(frozen=True)
class SetMode:
    mode: SyncMode


@dataclass(frozen=True)
class AdjustBatches:
    deltas: tuple[tuple[int, int], ...]  # (worker, sample delta)


@dataclass(frozen=True)
class NoChange:
    pass


PolicyAction = SetMode | AdjustBatches | NoChange


def baseline_policy_step(policy: str, obs: PolicyObservation) -> PolicyAction:
    """Next action for a non-predictive baseline policy."""
    n = obs.num_workers
    if policy == "ssgd":
        return SetMode(StaticX(n))
    if policy == "asgd":
        return SetMode(StaticX(1))
    if policy == "sync-switch":
        if obs.straggler_streak_s and max(obs.straggler_streak_s) >= SYNC_SWITCH_PERSIST_S:
            return SetMode(StaticX(1))
        return SetMode(StaticX(n))
    if policy == "lb-bsp":
        if (
            obs.extreme_pair_run >= LB_BSP_ROUNDS
            and obs.fastest_worker is not None
            and obs.slowest_worker is not None
        ):
            return AdjustBatches(
                deltas=(
                    (obs.fastest_worker, LB_BSP_DELTA),
                    (obs.slowest_worker, -LB_BSP_DELTA),
                )
            )
        return NoChange()
    if policy == "lgc":
        if obs.architecture == ALL_REDUCE:
            removed = max(n - LGC_KEEP, 0)
            return SetMode(ARRemoval(removed, obs.lgc_t_w if removed else 0.0))
        return SetMode(StaticX(min(LGC_KEEP, n)))
    if policy.startswith("static-"):
        x = int(policy.split("-", 1)[1])
        return SetMode(StaticX(min(x, n)))
    raise DomainError(f"unknown baseline policy {policy!r}")
