"""Core domain types for the cluster training simulator.

Everything here is plain data: server and model calibration records, job
descriptions, synchronization modes, and the progress bookkeeping helpers
shared by the decision layer and the engine. Types are frozen dataclasses so
snapshots can be passed between layers without defensive copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence, Union

PS = "ps"
ALL_REDUCE = "ar"
ARCHITECTURES = (PS, ALL_REDUCE)

#: Relative deviation above which a worker counts as a straggler.
STRAGGLER_THRESHOLD = 0.20

#: Floor applied to non-positive sensitivity factors so products stay finite.
SENSITIVITY_FLOOR = 1e-3


class DomainError(ValueError):
    """Raised for malformed domain objects outside full-world validation."""


class WorldValidationError(DomainError):
    """Raised by loaders when a world fails validation.

    Carries the complete error list, not just the first finding.
    """

    def __init__(self, errors: Sequence[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class ServerSpec:
    """A physical server: CPU cores, NIC bandwidth, exclusive GPU slots."""

    id: str
    cpu_capacity: float
    bw_capacity: float
    gpu_slots: int = 8


@dataclass(frozen=True)
class PgnsCurve:
    """Statistical-efficiency samples, (completed steps, phi) pairs.

    Lookup is a floor lookup: the sample with the largest step not above the
    query wins; queries below the first sample clamp to the first sample.
    """

    samples: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        if not self.samples:
            raise DomainError("pgns curve needs at least one sample")
        steps = [s for s, _ in self.samples]
        if steps != sorted(steps) or len(set(steps)) != len(steps):
            raise DomainError("pgns samples must have strictly increasing steps")
        for _, phi in self.samples:
            if phi < 0.0 or not math.isfinite(phi):
                raise DomainError("pgns phi values must be finite and non-negative")

    def phi_at(self, step: int) -> float:
        value = self.samples[0][1]
        for sample_step, phi in self.samples:
            if sample_step <= step:
                value = phi
            else:
                break
        return value

    @classmethod
    def flat(cls, phi: float) -> "PgnsCurve":
        return cls(samples=((0, float(phi)),))


def pgns_at_step(curve: PgnsCurve, step: int) -> float:
    """Phi for a job that has completed ``step`` mini-batch steps."""
    if step < 0:
        raise DomainError("step count cannot be negative")
    return curve.phi_at(step)


@dataclass(frozen=True)
class SensitivityProfile:
    """Calibrated slowdown response for one resource.

    ``throttle_points`` holds (fraction, tta_seconds) measurements taken with
    the resource throttled to ``fraction`` of its demand; ``baseline_tta`` is
    the unthrottled measurement.
    """

    baseline_tta: float
    throttle_points: tuple[tuple[float, float], ...]

    def sensitivity(self, floor: float = SENSITIVITY_FLOOR) -> float:
        """Product of relative slowdowns, each factor floored at ``floor``."""
        if self.baseline_tta <= 0.0:
            raise DomainError("baseline tta must be positive")
        result = 1.0
        for _, tta in self.throttle_points:
            factor = (tta - self.baseline_tta) / self.baseline_tta
            result *= max(factor, floor)
        return result


@dataclass(frozen=True)
class ModelProfile:
    """Calibration record for one model architecture.

    Work terms are per iteration at the job's configured per-worker batch;
    demand fields are the rates a task requests from its server (cores,
    bytes/s). An uncontended task receives exactly its demand, which makes
    preproc_work / cpu_demand the calibrated nominal pre-processing time.
    """

    name: str
    gpu_compute_time: float
    param_bytes: float
    preproc_work: float
    ps_update_work: float
    busy_poll_cores: float
    pgns: PgnsCurve
    progress_target_tta: float
    progress_target_conv: float
    sensitivity_cpu: SensitivityProfile
    sensitivity_bw: SensitivityProfile
    cpu_demand: float = 1.0
    bw_demand: float = 1e9
    ps_cpu_demand: float = 1.0
    ps_bw_demand: float = 0.0  # 0 means "same as bw_demand"

    def __post_init__(self) -> None:
        if self.ps_bw_demand == 0.0:
            object.__setattr__(self, "ps_bw_demand", self.bw_demand)

    def comm_bytes_default(self) -> float:
        """Bytes moved per worker iteration: gradients up plus parameters down."""
        return 2.0 * self.param_bytes


@dataclass(frozen=True)
class JobSpec:
    """One training job from the trace."""

    id: str
    submit_time: float
    model: str
    num_workers: int
    num_ps: int
    architecture: str
    batch_per_worker: int
    learning_rate: float
    policy: str = "ssgd"

    @property
    def total_batch(self) -> int:
        """Global batch M, summed over workers."""
        return self.num_workers * self.batch_per_worker


@dataclass(frozen=True)
class StaticX:
    """Update after gradients from any x workers; x = N is fully synchronous."""

    x: int

    def __post_init__(self) -> None:
        if self.x < 1:
            raise DomainError("static x must be at least 1")


@dataclass(frozen=True)
class Cluster:
    """One worker group with a shared internal barrier."""

    workers: tuple[int, ...]
    t_ci: float

    def __post_init__(self) -> None:
        if not self.workers:
            raise DomainError("cluster cannot be empty")

    @property
    def n_ci(self) -> int:
        return len(self.workers)


@dataclass(frozen=True)
class ClusterPartition:
    """Disjoint clusters ordered by ascending representative time."""

    clusters: tuple[Cluster, ...]

    def __post_init__(self) -> None:
        if not self.clusters:
            raise DomainError("partition needs at least one cluster")
        seen: set[int] = set()
        for cluster in self.clusters:
            for w in cluster.workers:
                if w in seen:
                    raise DomainError(f"worker {w} appears in two clusters")
                seen.add(w)
        times = [c.t_ci for c in self.clusters]
        if times != sorted(times):
            raise DomainError("clusters must be ordered by ascending time")

    @property
    def num_workers(self) -> int:
        return sum(c.n_ci for c in self.clusters)


@dataclass(frozen=True)
class DynamicX:
    """Independent per-cluster barriers; each cluster updates on its own."""

    partition: ClusterPartition


@dataclass(frozen=True)
class ARRemoval:
    """Ring all-reduce with x slowest workers removed to parent-child edges.

    Parents wait t_w seconds after the ring completes before aggregating
    late-arriving child gradients.
    """

    x: int
    t_w: float

    def __post_init__(self) -> None:
        if self.x < 0:
            raise DomainError("removed-worker count cannot be negative")
        if self.t_w < 0.0:
            raise DomainError("parent wait cannot be negative")


SyncMode = Union[StaticX, DynamicX, ARRemoval]


def ssgd_mode(num_workers: int) -> StaticX:
    return StaticX(num_workers)


def asgd_mode() -> StaticX:
    return StaticX(1)


def mode_label(mode: SyncMode) -> str:
    """Stable, parseable label, used in exports and logs."""
    if isinstance(mode, StaticX):
        return f"static-{mode.x}"
    if isinstance(mode, DynamicX):
        sizes = ",".join(str(c.n_ci) for c in mode.partition.clusters)
        return f"dynamic[{sizes}]"
    if isinstance(mode, ARRemoval):
        return f"ar-removal[x={mode.x},tw={mode.t_w:g}]"
    raise DomainError(f"unknown mode {mode!r}")


def effective_batch(
    mode: SyncMode, num_workers: int, total_batch: float, q: int = 0
) -> Union[float, tuple[float, ...]]:
    """Samples aggregated per parameter update under ``mode``.

    StaticX(x) pools x reports: x * M / N. DynamicX returns one value per
    cluster. ARRemoval keeps N - x ring workers plus q children that met the
    deadline: (N - x + q) * M / N.
    """
    if num_workers < 1:
        raise DomainError("num_workers must be positive")
    per_worker = total_batch / num_workers
    if isinstance(mode, StaticX):
        if mode.x > num_workers:
            raise DomainError("static x cannot exceed the worker count")
        return mode.x * per_worker
    if isinstance(mode, DynamicX):
        if mode.partition.num_workers != num_workers:
            raise DomainError("partition must cover every worker exactly once")
        return tuple(c.n_ci * per_worker for c in mode.partition.clusters)
    if isinstance(mode, ARRemoval):
        if mode.x > num_workers:
            raise DomainError("cannot remove more workers than exist")
        if q < 0 or q > mode.x:
            raise DomainError("q must lie in [0, x]")
        return (num_workers - mode.x + q) * per_worker
    raise DomainError(f"unknown mode {mode!r}")


@dataclass
class IterationRecord:
    """Realized phase breakdown of one worker iteration.

    ``total_s`` is the sum of the three phase times (own work, excluding
    barrier waits). Shares are the effective averages the phases received.
    Prediction fields are filled once the surrounding round is complete.
    """

    job_id: str
    worker: int
    iteration: int
    preproc_s: float
    compute_s: float
    comm_s: float
    total_s: float
    cpu_share: float
    bw_share: float
    straggler: bool | None = None
    predicted_total_s: float | None = None
    predicted_straggler: bool | None = None

    def __post_init__(self) -> None:
        expected = self.preproc_s + self.compute_s + self.comm_s
        if not math.isclose(self.total_s, expected, rel_tol=1e-9, abs_tol=1e-12):
            raise DomainError("total_s must equal the sum of phase times")


@dataclass(frozen=True)
class WorldSpec:
    """Servers, model calibration profiles, and the jobs to run."""

    servers: tuple[ServerSpec, ...]
    profiles: Mapping[str, ModelProfile]
    jobs: tuple[JobSpec, ...] = ()

    def with_jobs(self, jobs: Iterable[JobSpec]) -> "WorldSpec":
        return replace(self, jobs=tuple(jobs))

    def server(self, server_id: str) -> ServerSpec:
        for s in self.servers:
            if s.id == server_id:
                return s
        raise DomainError(f"unknown server {server_id!r}")


def _validate_server(server: ServerSpec, errors: list[str]) -> None:
    where = f"server {server.id!r}"
    if not server.id:
        errors.append("server with empty id")
    if server.cpu_capacity <= 0.0:
        errors.append(f"{where}: cpu_capacity must be positive")
    if server.bw_capacity <= 0.0:
        errors.append(f"{where}: bw_capacity must be positive")
    if server.gpu_slots < 0:
        errors.append(f"{where}: gpu_slots cannot be negative")


def _validate_profile(profile: ModelProfile, errors: list[str]) -> None:
    where = f"model {profile.name!r}"
    non_negative = (
        ("gpu_compute_time", profile.gpu_compute_time),
        ("param_bytes", profile.param_bytes),
        ("preproc_work", profile.preproc_work),
        ("ps_update_work", profile.ps_update_work),
        ("busy_poll_cores", profile.busy_poll_cores),
    )
    for name, value in non_negative:
        if value < 0.0 or not math.isfinite(value):
            errors.append(f"{where}: {name} must be finite and non-negative")
    positive = (
        ("progress_target_tta", profile.progress_target_tta),
        ("progress_target_conv", profile.progress_target_conv),
        ("cpu_demand", profile.cpu_demand),
        ("bw_demand", profile.bw_demand),
        ("ps_cpu_demand", profile.ps_cpu_demand),
        ("ps_bw_demand", profile.ps_bw_demand),
    )
    for name, value in positive:
        if value <= 0.0 or not math.isfinite(value):
            errors.append(f"{where}: {name} must be finite and positive")
    if profile.progress_target_conv < profile.progress_target_tta:
        errors.append(f"{where}: convergence target below tta target")
    for label, prof in (("cpu", profile.sensitivity_cpu), ("bw", profile.sensitivity_bw)):
        if prof.baseline_tta <= 0.0:
            errors.append(f"{where}: sensitivity_{label} baseline must be positive")
        for fraction, tta in prof.throttle_points:
            if not 0.0 < fraction <= 1.0:
                errors.append(f"{where}: sensitivity_{label} fraction {fraction} outside (0, 1]")
            if tta <= 0.0:
                errors.append(f"{where}: sensitivity_{label} tta must be positive")


def _validate_job(job: JobSpec, world: WorldSpec, errors: list[str]) -> None:
    where = f"job {job.id!r}"
    if not job.id:
        errors.append("job with empty id")
    if job.submit_time < 0.0:
        errors.append(f"{where}: submit_time cannot be negative")
    if job.num_workers < 2:
        errors.append(f"{where}: num_workers must be at least 2")
    if job.architecture not in ARCHITECTURES:
        errors.append(f"{where}: unknown architecture {job.architecture!r}")
    if job.architecture == PS and job.num_ps < 1:
        errors.append(f"{where}: ps architecture needs at least one parameter server")
    if job.architecture == ALL_REDUCE and job.num_ps != 0:
        errors.append(f"{where}: all-reduce jobs must not request parameter servers")
    if job.batch_per_worker < 1:
        errors.append(f"{where}: batch_per_worker must be positive")
    if job.learning_rate <= 0.0:
        errors.append(f"{where}: learning_rate must be positive")
    if job.model not in world.profiles:
        errors.append(f"{where}: unknown model {job.model!r}")
    total_slots = sum(s.gpu_slots for s in world.servers)
    if job.num_workers > total_slots:
        errors.append(f"{where}: needs {job.num_workers} GPU slots, cluster has {total_slots}")


def validate_world(world: WorldSpec) -> list[str]:
    """Validate a world exhaustively; returns all findings, empty when valid."""
    errors: list[str] = []
    if not world.servers:
        errors.append("world has no servers")
    seen_servers: set[str] = set()
    for server in world.servers:
        if server.id in seen_servers:
            errors.append(f"duplicate server id {server.id!r}")
        seen_servers.add(server.id)
        _validate_server(server, errors)
    for name, profile in world.profiles.items():
        if name != profile.name:
            errors.append(f"profile key {name!r} does not match profile name {profile.name!r}")
        _validate_profile(profile, errors)
    seen_jobs: set[str] = set()
    for job in world.jobs:
        if job.id in seen_jobs:
            errors.append(f"duplicate job id {job.id!r}")
        seen_jobs.add(job.id)
        _validate_job(job, world, errors)
    return errors
