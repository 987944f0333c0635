"""Run metrics: TTA/JCT, straggler counts, and prediction quality.

Straggler accounting follows the realized rule: within one iteration index,
a worker straggles when its time exceeds the fastest worker's by more than
the threshold fraction. Prediction quality aligns each worker's
next-iteration prediction with what that iteration actually did, and the
same alignment scores the fixed-persistence baseline rule for comparison.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .domain import STRAGGLER_THRESHOLD, IterationRecord
from .predictor import classify_stragglers, deviation_stats

#: Observed straggling must persist this long before the fixed rule flags.
FIXED_RULE_PERSIST_S = 5.0


@dataclass
class UpdateRecord:
    """One committed parameter update."""

    time_s: float
    step_before: int
    reports: int
    batch: float
    credit: float
    mode: str


@dataclass
class JobMetrics:
    job_id: str
    policy: str
    seed: int
    tta_s: float | None
    jct_s: float | None
    straggler_iterations: int
    predictor_fp: int
    predictor_fn: int
    decision_overhead_s: float
    incomplete: bool
    progress: float
    update_count: int
    dropped_reports: int
    final_learning_rate: float
    records: list[IterationRecord] = field(default_factory=list)
    updates: list[UpdateRecord] = field(default_factory=list)


@dataclass
class RunMetrics:
    seed: int
    policy: str
    horizon_s: float
    jobs: list[JobMetrics] = field(default_factory=list)

    def job(self, job_id: str) -> JobMetrics:
        for j in self.jobs:
            if j.job_id == job_id:
                return j
        raise KeyError(job_id)


def finalize_straggler_flags(
    records: Sequence[IterationRecord], threshold: float = STRAGGLER_THRESHOLD
) -> None:
    """Fill realized and predicted straggler flags, in place.

    Flags are computed per iteration index across the workers that reached
    it. Predicted flags use the per-worker predicted times recorded before
    the iteration ran; a worker without a prediction (the first iteration)
    keeps ``None`` there.
    """
    by_iteration: dict[int, list[IterationRecord]] = defaultdict(list)
    for record in records:
        by_iteration[record.iteration].append(record)
    for iteration, group in sorted(by_iteration.items()):
        group.sort(key=lambda r: r.worker)
        realized = deviation_stats([r.total_s for r in group])
        flagged = set(classify_stragglers(realized, threshold))
        for position, record in enumerate(group):
            record.straggler = position in flagged
        predicted = [r for r in group if r.predicted_total_s is not None]
        if len(predicted) >= 2:
            stats = deviation_stats([r.predicted_total_s for r in predicted])
            flagged_pred = set(classify_stragglers(stats, threshold))
            for position, record in enumerate(predicted):
                record.predicted_straggler = position in flagged_pred


def straggler_iteration_count(
    records: Sequence[IterationRecord],
) -> int:
    """Iterations during which at least one worker straggled."""
    flagged: set[int] = set()
    for record in records:
        if record.straggler:
            flagged.add(record.iteration)
    return len(flagged)


def fixed_rule_flags(
    records: Sequence[IterationRecord],
    persist_s: float = FIXED_RULE_PERSIST_S,
    threshold: float = STRAGGLER_THRESHOLD,
) -> dict[tuple[int, int], bool]:
    """Predictions of the fixed-persistence baseline, keyed (worker, iter).

    The rule flags a worker for the next iteration once its observed
    straggling has persisted at least ``persist_s`` seconds of wall time.
    Requires realized flags (see :func:`finalize_straggler_flags`).
    """
    per_worker: dict[int, list[IterationRecord]] = defaultdict(list)
    for record in records:
        per_worker[record.worker].append(record)
    flags: dict[tuple[int, int], bool] = {}
    for worker, history in per_worker.items():
        history.sort(key=lambda r: r.iteration)
        streak = 0.0
        for record in history:
            flags[(worker, record.iteration)] = streak >= persist_s
            if record.straggler:
                streak += record.total_s
            else:
                streak = 0.0
    return flags


@dataclass(frozen=True)
class PredictionQuality:
    false_positives: int
    false_negatives: int
    positives: int
    negatives: int

    @property
    def fp_rate(self) -> float:
        return self.false_positives / self.negatives if self.negatives else 0.0

    @property
    def fn_rate(self) -> float:
        return self.false_negatives / self.positives if self.positives else 0.0


def prediction_quality(
    records: Iterable[IterationRecord],
    flags: Mapping[tuple[int, int], bool] | None = None,
) -> PredictionQuality:
    """Score straggler predictions against realized outcomes.

    With ``flags`` given, those predictions are scored (the baseline rule);
    otherwise the model predictions stored on the records are. Records
    without both a prediction and a realized flag are skipped, so both
    predictors are scored over the same aligned set when the caller passes
    flags built from the same records.
    """
    fp = fn = pos = neg = 0
    for record in records:
        if record.straggler is None:
            continue
        if flags is not None:
            predicted = flags.get((record.worker, record.iteration))
        else:
            predicted = record.predicted_straggler
        if predicted is None:
            continue
        if record.straggler:
            pos += 1
            if not predicted:
                fn += 1
        else:
            neg += 1
            if predicted:
                fp += 1
    return PredictionQuality(fp, fn, pos, neg)


def replay_progress(updates: Sequence[UpdateRecord]) -> float:
    """Independent re-accumulation of progress from the update log."""
    return math.fsum(u.credit for u in updates)
