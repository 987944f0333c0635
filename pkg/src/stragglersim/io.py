"""File formats: input loaders and lossless result export.

Inputs are a cluster JSON (servers), a calibration JSON (model profiles), an
optional trace CSV (one job per line), and an optional perturbation JSON.
Results export two ways: a flat CSV with one row per job for spreadsheets,
and a structured JSON that round-trips every iteration record and update.

Floats are serialized with ``repr``, which in Python 3 is the shortest
string that parses back to the identical bit pattern, so export -> import ->
export is byte-stable.
"""

from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .decisions import DecisionSnapshot
from .domain import (
    ALL_REDUCE,
    PS,
    DomainError,
    IterationRecord,
    JobSpec,
    ModelProfile,
    PgnsCurve,
    SensitivityProfile,
    ServerSpec,
    WorldSpec,
    WorldValidationError,
    validate_world,
)
from .engine import MarkovSpec, Perturbation
from .metrics import JobMetrics, RunMetrics, UpdateRecord


class TraceParseError(DomainError):
    """Raised with every offending line collected, not just the first."""

    def __init__(self, problems: Sequence[tuple[int, str]]):
        self.problems = tuple(problems)
        lines = "; ".join(f"line {n}: {msg}" for n, msg in self.problems)
        super().__init__(f"trace rejected: {lines}")


def fmt_float(value: float | None) -> str:
    if value is None:
        return ""
    return repr(float(value))


def _parse_float(text: str, field: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ValueError(f"{field}: not a number: {text!r}") from exc


def _parse_int(text: str, field: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ValueError(f"{field}: not an integer: {text!r}") from exc


TRACE_COLUMNS = (
    "job_id",
    "submit_time",
    "model",
    "num_workers",
    "num_ps",
    "architecture",
    "batch_per_worker",
    "learning_rate",
    "policy",
)


def parse_trace(text: str) -> tuple[JobSpec, ...]:
    """Parse a job trace CSV; raises TraceParseError listing every bad line."""
    reader = csv.reader(_io.StringIO(text))
    rows = [row for row in reader]
    if not rows:
        raise TraceParseError([(1, "empty trace")])
    header = [h.strip() for h in rows[0]]
    if header != list(TRACE_COLUMNS):
        raise TraceParseError(
            [(1, f"header must be {','.join(TRACE_COLUMNS)}, got {','.join(header)}")]
        )
    problems: list[tuple[int, str]] = []
    jobs: list[JobSpec] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(TRACE_COLUMNS):
            problems.append((line_no, f"expected {len(TRACE_COLUMNS)} fields, got {len(row)}"))
            continue
        values = dict(zip(TRACE_COLUMNS, (cell.strip() for cell in row)))
        try:
            job = JobSpec(
                id=values["job_id"],
                submit_time=_parse_float(values["submit_time"], "submit_time"),
                model=values["model"],
                num_workers=_parse_int(values["num_workers"], "num_workers"),
                num_ps=_parse_int(values["num_ps"], "num_ps"),
                architecture=values["architecture"],
                batch_per_worker=_parse_int(values["batch_per_worker"], "batch_per_worker"),
                learning_rate=_parse_float(values["learning_rate"], "learning_rate"),
                policy=values["policy"],
            )
        except (ValueError, DomainError) as exc:
            problems.append((line_no, str(exc)))
            continue
        jobs.append(job)
    if problems:
        raise TraceParseError(problems)
    return tuple(jobs)


def load_trace(path: str | Path) -> tuple[JobSpec, ...]:
    return parse_trace(Path(path).read_text())


def _sensitivity_from(data: Mapping[str, Any]) -> SensitivityProfile:
    return SensitivityProfile(
        baseline_tta=float(data["baseline_tta"]),
        throttle_points=tuple(
            (float(f), float(t)) for f, t in data.get("throttle_points", [])
        ),
    )


def _pgns_from(data: Mapping[str, Any]) -> PgnsCurve:
    if "flat" in data:
        return PgnsCurve.flat(float(data["flat"]))
    samples = tuple((int(step), float(phi)) for step, phi in data["samples"])
    return PgnsCurve(samples=samples)


def parse_cluster(data: Mapping[str, Any]) -> tuple[ServerSpec, ...]:
    servers = []
    for entry in data["servers"]:
        servers.append(
            ServerSpec(
                id=str(entry["id"]),
                cpu_capacity=float(entry["cpu_capacity"]),
                bw_capacity=float(entry["bw_capacity"]),
                gpu_slots=int(entry.get("gpu_slots", 8)),
            )
        )
    return tuple(servers)


def parse_calibration(data: Mapping[str, Any]) -> dict[str, ModelProfile]:
    profiles: dict[str, ModelProfile] = {}
    for entry in data["models"]:
        profile = ModelProfile(
            name=str(entry["name"]),
            gpu_compute_time=float(entry["gpu_compute_time"]),
            param_bytes=float(entry["param_bytes"]),
            preproc_work=float(entry["preproc_work"]),
            ps_update_work=float(entry.get("ps_update_work", 0.0)),
            busy_poll_cores=float(entry.get("busy_poll_cores", 0.0)),
            pgns=_pgns_from(entry["pgns"]),
            progress_target_tta=float(entry["progress_target_tta"]),
            progress_target_conv=float(entry["progress_target_conv"]),
            sensitivity_cpu=_sensitivity_from(entry["sensitivity_cpu"]),
            sensitivity_bw=_sensitivity_from(entry["sensitivity_bw"]),
            cpu_demand=float(entry.get("cpu_demand", 1.0)),
            bw_demand=float(entry.get("bw_demand", 1e9)),
            ps_cpu_demand=float(entry.get("ps_cpu_demand", 1.0)),
            ps_bw_demand=float(entry.get("ps_bw_demand", 0.0)),
        )
        profiles[profile.name] = profile
    return profiles


def load_world(
    cluster_path: str | Path,
    calibration_path: str | Path,
    trace_path: str | Path | None = None,
) -> WorldSpec:
    """Assemble and validate a world; raises WorldValidationError on problems."""
    cluster = json.loads(Path(cluster_path).read_text())
    calibration = json.loads(Path(calibration_path).read_text())
    jobs: tuple[JobSpec, ...] = ()
    if trace_path is not None:
        jobs = load_trace(trace_path)
    world = WorldSpec(
        servers=parse_cluster(cluster),
        profiles=parse_calibration(calibration),
        jobs=jobs,
    )
    errors = validate_world(world)
    if errors:
        raise WorldValidationError(errors)
    return world


def parse_perturbations(data: Mapping[str, Any]) -> tuple[Perturbation, ...]:
    out = []
    for entry in data.get("perturbations", []):
        markov = None
        if "markov" in entry and entry["markov"] is not None:
            m = entry["markov"]
            markov = MarkovSpec(
                mean_on_s=float(m["mean_on_s"]),
                mean_off_s=float(m["mean_off_s"]),
                seed=int(m.get("seed", 0)),
            )
        out.append(
            Perturbation(
                kind=str(entry["kind"]),
                fraction=float(entry["fraction"]),
                start=float(entry["start"]),
                end=float(entry["end"]),
                server=entry.get("server"),
                task=entry.get("task"),
                markov=markov,
            )
        )
    return tuple(out)


def load_perturbations(path: str | Path) -> tuple[Perturbation, ...]:
    return parse_perturbations(json.loads(Path(path).read_text()))


ROW_COLUMNS = (
    "job_id",
    "policy",
    "seed",
    "tta_s",
    "jct_s",
    "straggler_iterations",
    "predictor_fp",
    "predictor_fn",
    "decision_overhead_s",
    "incomplete",
    "progress",
    "update_count",
    "dropped_reports",
    "final_learning_rate",
)


def metrics_rows_csv(runs: Sequence[RunMetrics]) -> str:
    """One CSV line per (job, policy, seed) across all runs."""
    out = _io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(ROW_COLUMNS)
    for run in runs:
        for job in run.jobs:
            writer.writerow(
                [
                    job.job_id,
                    job.policy,
                    str(job.seed),
                    fmt_float(job.tta_s),
                    fmt_float(job.jct_s),
                    str(job.straggler_iterations),
                    str(job.predictor_fp),
                    str(job.predictor_fn),
                    fmt_float(job.decision_overhead_s),
                    "1" if job.incomplete else "0",
                    fmt_float(job.progress),
                    str(job.update_count),
                    str(job.dropped_reports),
                    fmt_float(job.final_learning_rate),
                ]
            )
    return out.getvalue()


def _record_obj(record: IterationRecord) -> dict[str, Any]:
    return {
        "job_id": record.job_id,
        "worker": record.worker,
        "iteration": record.iteration,
        "preproc_s": record.preproc_s,
        "compute_s": record.compute_s,
        "comm_s": record.comm_s,
        "total_s": record.total_s,
        "cpu_share": record.cpu_share,
        "bw_share": record.bw_share,
        "straggler": record.straggler,
        "predicted_total_s": record.predicted_total_s,
        "predicted_straggler": record.predicted_straggler,
    }


def _update_obj(update: UpdateRecord) -> dict[str, Any]:
    return {
        "time_s": update.time_s,
        "step_before": update.step_before,
        "reports": update.reports,
        "batch": update.batch,
        "credit": update.credit,
        "mode": update.mode,
    }


def run_to_json(run: RunMetrics) -> str:
    """Structured export with per-iteration records and the update log."""
    payload = {
        "seed": run.seed,
        "policy": run.policy,
        "horizon_s": run.horizon_s,
        "jobs": [
            {
                "job_id": job.job_id,
                "policy": job.policy,
                "seed": job.seed,
                "tta_s": job.tta_s,
                "jct_s": job.jct_s,
                "straggler_iterations": job.straggler_iterations,
                "predictor_fp": job.predictor_fp,
                "predictor_fn": job.predictor_fn,
                "decision_overhead_s": job.decision_overhead_s,
                "incomplete": job.incomplete,
                "progress": job.progress,
                "update_count": job.update_count,
                "dropped_reports": job.dropped_reports,
                "final_learning_rate": job.final_learning_rate,
                "records": [_record_obj(r) for r in job.records],
                "updates": [_update_obj(u) for u in job.updates],
            }
            for job in run.jobs
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def run_from_json(text: str) -> RunMetrics:
    data = json.loads(text)
    run = RunMetrics(
        seed=int(data["seed"]), policy=str(data["policy"]), horizon_s=float(data["horizon_s"])
    )
    for entry in data["jobs"]:
        records = [
            IterationRecord(
                job_id=r["job_id"],
                worker=int(r["worker"]),
                iteration=int(r["iteration"]),
                preproc_s=float(r["preproc_s"]),
                compute_s=float(r["compute_s"]),
                comm_s=float(r["comm_s"]),
                total_s=float(r["total_s"]),
                cpu_share=float(r["cpu_share"]),
                bw_share=float(r["bw_share"]),
                straggler=r["straggler"],
                predicted_total_s=r["predicted_total_s"],
                predicted_straggler=r["predicted_straggler"],
            )
            for r in entry["records"]
        ]
        updates = [
            UpdateRecord(
                time_s=float(u["time_s"]),
                step_before=int(u["step_before"]),
                reports=int(u["reports"]),
                batch=float(u["batch"]),
                credit=float(u["credit"]),
                mode=str(u["mode"]),
            )
            for u in entry["updates"]
        ]
        run.jobs.append(
            JobMetrics(
                job_id=entry["job_id"],
                policy=entry["policy"],
                seed=int(entry["seed"]),
                tta_s=entry["tta_s"],
                jct_s=entry["jct_s"],
                straggler_iterations=int(entry["straggler_iterations"]),
                predictor_fp=int(entry["predictor_fp"]),
                predictor_fn=int(entry["predictor_fn"]),
                decision_overhead_s=float(entry["decision_overhead_s"]),
                incomplete=bool(entry["incomplete"]),
                progress=float(entry["progress"]),
                update_count=int(entry["update_count"]),
                dropped_reports=int(entry["dropped_reports"]),
                final_learning_rate=float(entry["final_learning_rate"]),
                records=records,
                updates=updates,
            )
        )
    return run


def snapshot_from_json(text: str) -> DecisionSnapshot:
    data = json.loads(text)
    return DecisionSnapshot.from_predictions(
        [float(t) for t in data["predicted_times"]],
        model_id=str(data["model_id"]),
        learning_rate=float(data["learning_rate"]),
        completed_steps=int(data.get("completed_steps", 0)),
        total_batch=float(data["total_batch"]),
        architecture=str(data.get("architecture", PS)),
        phi=float(data["phi"]),
    )


def write_text(path: str | Path, text: str) -> None:
    Path(path).write_text(text)
