"""Deterministic discrete-event engine.

Model: every task phase is either timed (GPU compute, waits) or a pool of
work draining at a rate set by max-min fair allocation on its server. Rates
are piecewise constant: they change only at events (phase completions,
perturbation window edges, decisions), and the allocator runs again at each
one. Transfers are flows that demand bandwidth at both endpoint servers and
move at the smaller of the two shares.

Synchronization semantics:

* ``StaticX(x)``: gradient reports pool in arrival order and every x of them
  commit one update; late reports defer to the next update, nothing drops.
  A worker resumes once the update consuming its report pushes parameters
  back to it. x = N degenerates to a full round barrier.
* ``DynamicX``: each cluster keeps its own barrier and updates alone.
* ``ARRemoval(x, t_w)``: ring workers round-barrier; parents wait t_w after
  the ring for child gradients. A child gradient that misses the deadline is
  dropped and the child restarts from the fresh broadcast.

All randomness derives from the run seed; identical inputs replay to
byte-identical metrics.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import metrics as metrics_mod
from .decisions import (
    DEFAULT_DECISION_LATENCY,
    DEFAULT_TW_GRID,
    MIN_TRAINING_ROWS,
    AdjustBatches,
    DecisionSnapshot,
    ModeCandidate,
    NoChange,
    PolicyObservation,
    RegressorDataset,
    SetMode,
    baseline_policy_step,
    mode_label,
    mode_learning_rates,
    rank_mode_candidates,
    rank_mode_candidates_ml,
    select_mode_heuristic,
    train_mode_regressor,
)
from .domain import (
    ALL_REDUCE,
    PS,
    STRAGGLER_THRESHOLD,
    ARRemoval,
    DomainError,
    DynamicX,
    IterationRecord,
    JobSpec,
    ModelProfile,
    PgnsCurve,
    StaticX,
    SyncMode,
    WorldSpec,
    WorldValidationError,
    pgns_at_step,
    ssgd_mode,
    validate_world,
)
from .metrics import JobMetrics, RunMetrics, UpdateRecord
from .predictor import (
    HistoryWindow,
    ShareForecaster,
    classify_stragglers,
    deviation_stats,
)
from .prevention import (
    BeneficiaryNeed,
    GroupPeer,
    PlacementError,
    ReallocationPlan,
    RingPeer,
    ServerLoad,
    VictimTask,
    assign_child_parent,
    place_high_load_task,
    plan_reallocation,
)
from .resources import DemandSet, maxmin_allocate, phase_durations

CPU_THROTTLE = "cpu_throttle"
BW_THROTTLE = "bw_throttle"


@dataclass(frozen=True)
class MarkovSpec:
    """On/off alternation with exponential holding times."""

    mean_on_s: float
    mean_off_s: float
    seed: int = 0


@dataclass(frozen=True)
class Perturbation:
    """A capacity or demand multiplier over a time window.

    Targets either a whole server (capacity scales) or a single task (its
    demand is capped at the fraction). Overlapping windows compose
    multiplicatively. An optional Markov spec chops the window into on/off
    sub-windows drawn from the run seed.
    """

    kind: str
    fraction: float
    start: float
    end: float
    server: str | None = None
    task: str | None = None

    markov: MarkovSpec | None = None

    def __post_init__(self) -> None:
        if self.kind not in (CPU_THROTTLE, BW_THROTTLE):
            raise DomainError(f"unknown perturbation kind {self.kind!r}")
        if not 0.0 < self.fraction:
            raise DomainError("fraction must be positive")
        if self.end <= self.start:
            raise DomainError("window must have positive length")
        if (self.server is None) == (self.task is None):
            raise DomainError("exactly one of server/task must be targeted")


@dataclass(frozen=True)
class PerturbationWindow:
    """A concrete (post-Markov) multiplier window."""

    kind: str
    fraction: float
    start: float
    end: float
    server: str | None
    task: str | None


def compile_perturbations(
    perturbations: Sequence[Perturbation], seed: int
) -> tuple[PerturbationWindow, ...]:
    """Materialize every window up front.

    Markov alternation is sampled here, from the run seed and the
    perturbation's position, never from simulation state: the realization is
    identical for every policy run against the same seed.
    """
    windows: list[PerturbationWindow] = []
    for index, p in enumerate(perturbations):
        if p.markov is None:
            windows.append(
                PerturbationWindow(p.kind, p.fraction, p.start, p.end, p.server, p.task)
            )
            continue
        rng = np.random.default_rng([seed, p.markov.seed, index])
        t = p.start
        active = True
        while t < p.end:
            hold = float(
                rng.exponential(p.markov.mean_on_s if active else p.markov.mean_off_s)
            )
            if active:
                windows.append(
                    PerturbationWindow(
                        p.kind, p.fraction, t, min(t + hold, p.end), p.server, p.task
                    )
                )
            t += hold
            active = not active
    return tuple(windows)


@dataclass(frozen=True)
class EngineConfig:
    straggler_threshold: float = STRAGGLER_THRESHOLD
    history_capacity: int = 100
    forecast_order: int = 3
    tw_grid: tuple[float, ...] = DEFAULT_TW_GRID
    decision_latency: float = DEFAULT_DECISION_LATENCY
    timing: str | None = None  # None = policy default
    horizon_s: float = 7200.0
    min_training_rows: int = MIN_TRAINING_ROWS
    eval_window_updates: int = 50
    # While the predicted straggler set is unchanged, re-run the selection
    # engine only this often (rounds). Set changes always trigger it.
    reselect_interval_rounds: int = 25
    placement: str = "balanced"  # or "packed"
    lgc_t_w: float = 0.060
    record_iterations: bool = True
    # Pin every job to one mode and disable decisions; sweep support.
    pinned_mode: SyncMode | None = None


_POLICY_TIMING = {
    "adaptive-h": "pause",
    "adaptive-ml": "overlap",
    "adaptive-early": "lookahead",
}


class _Activity:
    __slots__ = (
        "aid",
        "kind",  # "cpu" or "flow"
        "owner",  # task id for perturbation targeting
        "servers",
        "demand",
        "remaining",
        "rate",
        "callback",
        "done",
        "version",
    )

    def __init__(self, aid, kind, owner, servers, demand, remaining, callback):
        self.aid = aid
        self.kind = kind
        self.owner = owner
        self.servers = servers
        self.demand = demand
        self.remaining = remaining
        self.rate = 0.0
        self.callback = callback
        self.done = False
        self.version = 0


class _Worker:
    def __init__(self, job: "_Job", index: int, server: str):
        self.job = job
        self.index = index
        self.server = server
        self.task_id = f"{job.spec.id}:w{index}"
        self.history = HistoryWindow(job.engine.config.history_capacity)
        self.batch = job.spec.batch_per_worker
        self.iteration = 0
        self.iter_start = 0.0
        self.preproc_s = 0.0
        self.compute_s = 0.0
        self.comm_s = 0.0
        self.transfer_start = 0.0
        self.pending_flows = 0
        self.predicted_current: float | None = None
        self.predicted_next: float | None = None
        self.completed = 0
        self.waiting_since: float | None = None

    @property
    def batch_scale(self) -> float:
        return self.batch / self.job.spec.batch_per_worker


class _PsShard:
    def __init__(self, job: "_Job", index: int, server: str):
        self.job = job
        self.index = index
        self.server = server
        self.task_id = f"{job.spec.id}:ps{index}"
        self.busy = False


class _Job:
    def __init__(self, engine: "_Engine", spec: JobSpec, profile: ModelProfile):
        self.engine = engine
        self.spec = spec
        self.profile = profile
        self.policy = spec.policy
        self.workers: list[_Worker] = []
        self.ps_shards: list[_PsShard] = []
        pinned = engine.config.pinned_mode
        if pinned is not None:
            self.mode = pinned
        elif spec.architecture == PS:
            self.mode = ssgd_mode(spec.num_workers)
        else:
            self.mode = ARRemoval(0, 0.0)
        self.lr_base = spec.learning_rate
        self.lr_applied: float | tuple[float, ...] = spec.learning_rate
        self.progress = 0.0
        self.steps = 0
        self.updates: list[UpdateRecord] = []
        self.records: list[IterationRecord] = []
        self.tta_s: float | None = None
        self.jct_s: float | None = None
        self.done = False
        self.placed = False
        self.dropped_reports = 0
        self.decision_overhead_s = 0.0
        # pooling state (PS)
        self.unconsumed: list[tuple[float, int, int]] = []  # (time, seq, worker idx)
        self.update_queue: list[list[int]] = []
        self.updating = False
        self.shards_pending = 0
        self.active_batch: list[int] = []
        self.blocked_until = 0.0
        # round state (AR)
        self.ring: tuple[int, ...] = tuple(range(spec.num_workers))
        self.children: dict[int, int] = {}
        self.ring_pending: set[int] = set()
        self.child_arrived: list[int] = []
        self.round_open = False
        self.pending_mode: SyncMode | None = None
        # realized-history bookkeeping
        self.finalized_rounds = 0
        self.straggler_streak_s = [0.0] * spec.num_workers
        self.extreme_pair_run = 0
        self.extreme_pair: tuple[int, int] | None = None
        self.last_round_times: tuple[float, ...] | None = None
        self.last_decision_round = 0
        self.last_selection_round: int | None = None
        self.last_straggler_set: tuple[int, ...] = ()
        self.stale_snapshot: DecisionSnapshot | None = None
        self.last_decision_time: float | None = None
        self.last_decision_state: tuple[DecisionSnapshot, SyncMode, float] | None = None
        self.progress_history: list[tuple[int, float]] = [(0, 0.0)]
        self.plan_caps: dict[str, tuple[float, float]] = {}

    @property
    def phi(self) -> float:
        return pgns_at_step(self.profile.pgns, self.steps)

    def accuracy_gain(self) -> float:
        """Progress gained over the trailing evaluation window, per update."""
        window = self.engine.config.eval_window_updates
        count = len(self.updates)
        past = 0.0
        for upd_index, prog in reversed(self.progress_history):
            if upd_index <= count - window:
                past = prog
                break
        span = min(count, window)
        if span == 0:
            return 0.0
        return (self.progress - past) / span


class _Engine:
    def __init__(
        self,
        world: WorldSpec,
        perturbations: Sequence[Perturbation],
        policy: str | None,
        seed: int,
        config: EngineConfig,
    ):
        errors = validate_world(world)
        if errors:
            raise WorldValidationError(errors)
        self.world = world
        self.config = config
        self.seed = seed
        self.now = 0.0
        self.heap: list = []
        self.seq = itertools.count()
        self.activities: dict[int, _Activity] = {}
        self.aid_counter = itertools.count(1)
        self.passive: dict[str, tuple[str, float]] = {}  # task id -> (server, cores)
        self.windows = compile_perturbations(perturbations, seed)
        self.active_windows: set[int] = set()
        self.forecaster = ShareForecaster(order=config.forecast_order)
        self.jobs: dict[str, _Job] = {}
        self.pending_jobs: list[str] = []
        self.gpu_free = {s.id: s.gpu_slots for s in world.servers}
        self.dataset = RegressorDataset()
        self.regressor = None
        specs = list(world.jobs)
        if policy is not None:
            specs = [replace(s, policy=policy) for s in specs]
        for spec in specs:
            job = _Job(self, spec, world.profiles[spec.model])
            self.jobs[spec.id] = job
            self._push(spec.submit_time, self._submit_job, (spec.id,))
        for i, w in enumerate(self.windows):
            self._push(w.start, self._window_edge, (i, True))
            self._push(w.end, self._window_edge, (i, False))

    # -- event machinery -----------------------------------------------------

    def _push(self, time: float, fn: Callable, args: tuple) -> None:
        heapq.heappush(self.heap, (time, next(self.seq), fn, args))

    def _advance_to(self, time: float) -> None:
        dt = time - self.now
        if dt > 0.0:
            for act in self.activities.values():
                if not act.done and act.rate > 0.0:
                    act.remaining = max(act.remaining - act.rate * dt, 0.0)
        self.now = time

    def _multiplier(self, kind: str, server: str | None, task: str | None) -> float:
        value = 1.0
        for index in sorted(self.active_windows):
            w = self.windows[index]
            if w.kind != kind:
                continue
            if server is not None and w.server == server:
                value *= w.fraction
            if task is not None and w.task == task:
                value *= w.fraction
        return value

    def _effective_demand(self, act: _Activity) -> float:
        if act.kind == "cpu":
            demand = act.demand * self._multiplier(CPU_THROTTLE, None, act.owner)
            cap = self._cap_for(act.owner, 0)
        else:
            demand = act.demand * self._multiplier(BW_THROTTLE, None, act.owner)
            cap = self._cap_for(act.owner, 1)
        return min(demand, cap) if cap is not None else demand

    def _cap_for(self, task_id: str, resource: int) -> float | None:
        job_id = task_id.split(":", 1)[0]
        job = self.jobs.get(job_id)
        if job is None:
            return None
        cap = job.plan_caps.get(task_id)
        if cap is None:
            return None
        value = cap[resource]
        return value if value >= 0.0 else None

    def _recompute(self) -> None:
        cpu_entries: dict[str, list[tuple]] = {s.id: [] for s in self.world.servers}
        bw_entries: dict[str, list[tuple]] = {s.id: [] for s in self.world.servers}
        for act in self.activities.values():
            if act.done:
                continue
            demand = self._effective_demand(act)
            if act.kind == "cpu":
                cpu_entries[act.servers[0]].append((("a", act.aid), demand))
            else:
                for server in act.servers:
                    bw_entries[server].append((("a", act.aid), demand))
        for task_id, (server, cores) in sorted(self.passive.items()):
            demand = cores * self._multiplier(CPU_THROTTLE, None, task_id)
            cap = self._cap_for(task_id, 0)
            if cap is not None:
                demand = min(demand, cap)
            cpu_entries[server].append((("p", task_id), demand))
        cpu_shares: dict[str, dict] = {}
        bw_shares: dict[str, dict] = {}
        for server in self.world.servers:
            cpu_cap = server.cpu_capacity * self._multiplier(CPU_THROTTLE, server.id, None)
            bw_cap = server.bw_capacity * self._multiplier(BW_THROTTLE, server.id, None)
            cpu_shares[server.id] = maxmin_allocate(
                DemandSet(tuple(cpu_entries[server.id]), cpu_cap)
            )
            bw_shares[server.id] = maxmin_allocate(
                DemandSet(tuple(bw_entries[server.id]), bw_cap)
            )
        for act in self.activities.values():
            if act.done:
                continue
            if act.kind == "cpu":
                rate = cpu_shares[act.servers[0]].get(("a", act.aid), 0.0)
            else:
                rate = min(bw_shares[s].get(("a", act.aid), 0.0) for s in act.servers)
            if rate != act.rate or act.version == 0:
                act.rate = rate
                act.version += 1
                if rate > 0.0:
                    finish = self.now + act.remaining / rate
                    self._push(finish, self._activity_done, (act.aid, act.version))

    def _activity_done(self, aid: int, version: int) -> None:
        act = self.activities.get(aid)
        if act is None or act.done or act.version != version:
            return
        if act.remaining > 1e-9 * max(act.rate, 1.0):
            # A stale schedule raced a rate change; let the reschedule win.
            if act.rate > 0.0:
                act.version += 1
                self._push(
                    self.now + act.remaining / act.rate,
                    self._activity_done,
                    (act.aid, act.version),
                )
            return
        act.done = True
        del self.activities[aid]
        act.callback(self.now)

    def _start_activity(
        self,
        kind: str,
        owner: str,
        servers: tuple[str, ...],
        demand: float,
        work: float,
        callback: Callable[[float], None],
    ) -> int:
        aid = next(self.aid_counter)
        act = _Activity(aid, kind, owner, servers, demand, work, callback)
        self.activities[aid] = act
        if work <= 0.0:
            act.done = True
            del self.activities[aid]
            self._push(self.now, lambda cb=callback: cb(self.now), ())
            return aid
        return aid

    def _cancel_owner(self, owner: str) -> None:
        for aid in [a for a, act in self.activities.items() if act.owner == owner]:
            self.activities[aid].done = True
            del self.activities[aid]

    def _window_edge(self, index: int, opening: bool) -> None:
        if opening:
            self.active_windows.add(index)
        else:
            self.active_windows.discard(index)

    # -- placement -------------------------------------------------------------

    def _submit_job(self, job_id: str) -> None:
        self.pending_jobs.append(job_id)
        self._try_place_pending()

    def _try_place_pending(self) -> None:
        placed_any = True
        while placed_any and self.pending_jobs:
            placed_any = False
            job = self.jobs[self.pending_jobs[0]]
            if self._place_job(job):
                self.pending_jobs.pop(0)
                placed_any = True

    def _server_loads(self) -> list[ServerLoad]:
        nominal_cpu = {s.id: 0.0 for s in self.world.servers}
        nominal_bw = {s.id: 0.0 for s in self.world.servers}
        ps_counts = {s.id: 0 for s in self.world.servers}
        for job in self.jobs.values():
            if not job.placed or job.done:
                continue
            for w in job.workers:
                nominal_cpu[w.server] += job.profile.cpu_demand
                nominal_bw[w.server] += job.profile.bw_demand
            for shard in job.ps_shards:
                nominal_cpu[shard.server] += job.profile.ps_cpu_demand
                nominal_bw[shard.server] += job.profile.ps_bw_demand
                ps_counts[shard.server] += 1
        return [
            ServerLoad(
                id=s.id,
                ps_count=ps_counts[s.id],
                cpu_headroom=s.cpu_capacity - nominal_cpu[s.id],
                bw_headroom=s.bw_capacity - nominal_bw[s.id],
                cpu_capacity=s.cpu_capacity,
                bw_capacity=s.bw_capacity,
            )
            for s in sorted(self.world.servers, key=lambda s: s.id)
        ]

    def _place_job(self, job: _Job) -> bool:
        spec = job.spec
        servers = sorted(self.world.servers, key=lambda s: s.id)
        free = dict(self.gpu_free)
        assignment: list[str] = []
        for server in servers:
            while free[server.id] > 0 and len(assignment) < spec.num_workers:
                free[server.id] -= 1
                assignment.append(server.id)
        if len(assignment) < spec.num_workers:
            return False
        self.gpu_free = free
        job.workers = [_Worker(job, i, srv) for i, srv in enumerate(assignment)]
        if spec.architecture == PS:
            for k in range(spec.num_ps):
                loads = self._server_loads()
                if self.config.placement == "packed":
                    feasible = [
                        s
                        for s in loads
                        if s.cpu_headroom >= job.profile.ps_cpu_demand
                        and s.bw_headroom >= job.profile.ps_bw_demand
                    ]
                    if not feasible:
                        raise PlacementError(
                            f"job {spec.id!r}: no server can host parameter server {k}"
                        )
                    chosen = feasible[0].id
                else:
                    try:
                        chosen = place_high_load_task(
                            job.profile.ps_cpu_demand, job.profile.ps_bw_demand, loads
                        )
                    except PlacementError as exc:
                        raise PlacementError(f"job {spec.id!r}: {exc}") from exc
                shard = _PsShard(job, k, chosen)
                job.ps_shards.append(shard)
                self.passive[shard.task_id] = (chosen, job.profile.busy_poll_cores)
        job.placed = True
        self._initial_mode(job)
        if spec.architecture == ALL_REDUCE:
            initial = job.mode if isinstance(job.mode, ARRemoval) else ARRemoval(0, 0.0)
            self._apply_ar_membership(job, initial, None)
            self._start_round(job)
        else:
            for worker in job.workers:
                self._start_iteration(worker)
        self._recompute()
        return True

    def _initial_mode(self, job: _Job) -> None:
        """Unconditional baseline modes apply from the first iteration."""
        if self.config.pinned_mode is not None or job.policy in (
            "adaptive-h",
            "adaptive-ml",
            "adaptive-early",
        ):
            return
        obs = PolicyObservation(
            num_workers=job.spec.num_workers,
            architecture=job.spec.architecture,
            straggler_streak_s=tuple([0.0] * job.spec.num_workers),
            extreme_pair_run=0,
            fastest_worker=None,
            slowest_worker=None,
            lgc_t_w=self.config.lgc_t_w,
        )
        action = baseline_policy_step(job.policy, obs)
        if isinstance(action, SetMode) and action.mode != job.mode:
            job.mode = action.mode
            job.lr_applied = mode_learning_rates(
                action.mode, job.spec.num_workers, job.lr_base
            )

    # -- worker state machine (both architectures) ----------------------------

    def _start_iteration(self, worker: _Worker) -> None:
        job = worker.job
        if job.done:
            return
        worker.iter_start = self.now
        worker.preproc_s = worker.compute_s = worker.comm_s = 0.0
        worker.predicted_current = worker.predicted_next
        work = job.profile.preproc_work * worker.batch_scale
        self._start_activity(
            "cpu",
            worker.task_id,
            (worker.server,),
            job.profile.cpu_demand,
            work,
            lambda t, w=worker: self._preproc_done(w, t),
        )

    def _preproc_done(self, worker: _Worker, t: float) -> None:
        if worker.job.done:
            return
        worker.preproc_s = t - worker.iter_start
        duration = worker.job.profile.gpu_compute_time * worker.batch_scale
        self._push(t + duration, self._compute_done, (worker,))

    def _compute_done(self, worker: _Worker) -> None:
        job = worker.job
        if job.done:
            return
        worker.compute_s = job.profile.gpu_compute_time * worker.batch_scale
        worker.transfer_start = self.now
        if job.spec.architecture == PS:
            self._start_report_flows(worker)
        else:
            self._start_ring_or_child_flow(worker)

    def _start_report_flows(self, worker: _Worker) -> None:
        job = worker.job
        shards = job.ps_shards
        worker.pending_flows = len(shards)
        bytes_per = job.profile.param_bytes / len(shards)
        demand_per = job.profile.bw_demand / len(shards)
        for shard in shards:
            servers = (
                (worker.server,)
                if shard.server == worker.server
                else (worker.server, shard.server)
            )
            self._start_activity(
                "flow",
                worker.task_id,
                servers,
                demand_per,
                bytes_per,
                lambda t, w=worker: self._report_flow_done(w, t),
            )
        self._recompute()

    def _report_flow_done(self, worker: _Worker, t: float) -> None:
        job = worker.job
        if job.done:
            return
        worker.pending_flows -= 1
        if worker.pending_flows > 0:
            return
        worker.comm_s += t - worker.transfer_start
        worker.waiting_since = t
        job.unconsumed.append((t, next(self.seq), worker.index))
        self._pool_reports(job)

    def _pool_reports(self, job: _Job) -> None:
        """Fire every update whose gradient group is complete."""
        mode = job.mode
        if isinstance(mode, StaticX):
            while len(job.unconsumed) >= mode.x:
                batch = [w for _, _, w in job.unconsumed[: mode.x]]
                job.unconsumed = job.unconsumed[mode.x :]
                job.update_queue.append(batch)
        elif isinstance(mode, DynamicX):
            membership = {}
            for c_index, cluster in enumerate(mode.partition.clusters):
                for w in cluster.workers:
                    membership[w] = c_index
            changed = True
            while changed:
                changed = False
                per_cluster: dict[int, list[tuple[float, int, int]]] = {}
                for entry in job.unconsumed:
                    per_cluster.setdefault(membership[entry[2]], []).append(entry)
                for c_index, cluster in enumerate(mode.partition.clusters):
                    entries = per_cluster.get(c_index, [])
                    if len(entries) == cluster.n_ci:
                        job.unconsumed = [e for e in job.unconsumed if e not in entries]
                        job.update_queue.append([w for _, _, w in entries])
                        changed = True
        else:
            raise DomainError("all-reduce jobs do not pool at a parameter server")
        self._try_start_update(job)

    def _try_start_update(self, job: _Job) -> None:
        if job.updating or not job.update_queue or job.done:
            return
        if self.now < job.blocked_until:
            self._push(job.blocked_until, self._unblock_ps, (job,))
            return
        job.updating = True
        job.active_batch = job.update_queue.pop(0)
        job.shards_pending = len(job.ps_shards)
        work = job.profile.ps_update_work / len(job.ps_shards)
        for shard in job.ps_shards:
            del self.passive[shard.task_id]
            self._start_activity(
                "cpu",
                shard.task_id,
                (shard.server,),
                job.profile.ps_cpu_demand,
                work,
                lambda t, j=job, s=shard: self._shard_update_done(j, s, t),
            )
        self._recompute()

    def _unblock_ps(self, job: _Job) -> None:
        self._try_start_update(job)

    def _shard_update_done(self, job: _Job, shard: _PsShard, t: float) -> None:
        self.passive[shard.task_id] = (shard.server, job.profile.busy_poll_cores)
        job.shards_pending -= 1
        if job.shards_pending > 0:
            return
        job.updating = False
        batch_workers = job.active_batch
        job.active_batch = []
        self._commit_update(job, batch_workers, t)
        self._try_start_update(job)

    def _commit_update(self, job: _Job, worker_indices: list[int], t: float) -> None:
        reports = len(worker_indices)
        per_worker = job.spec.total_batch / job.spec.num_workers
        batch = reports * per_worker
        self._credit_progress(job, reports, batch, t)
        if job.done:
            return
        for index in worker_indices:
            self._start_param_push(job.workers[index])
        self._recompute()

    def _credit_progress(self, job: _Job, reports: int, batch: float, t: float) -> None:
        phi = job.phi
        credit = 1.0 / (1.0 + phi / batch)
        job.updates.append(
            UpdateRecord(
                time_s=t,
                step_before=job.steps,
                reports=reports,
                batch=batch,
                credit=credit,
                mode=mode_label(job.mode),
            )
        )
        job.progress += credit
        job.steps += reports
        job.progress_history.append((len(job.updates), job.progress))
        if len(job.progress_history) > 4 * self.config.eval_window_updates:
            del job.progress_history[: 2 * self.config.eval_window_updates]
        target_tta = job.profile.progress_target_tta
        if job.tta_s is None and job.progress >= target_tta:
            job.tta_s = t - job.spec.submit_time
        if job.progress >= job.profile.progress_target_conv:
            job.jct_s = t - job.spec.submit_time
            self._finish_job(job)

    def _start_param_push(self, worker: _Worker) -> None:
        job = worker.job
        shards = job.ps_shards
        worker.pending_flows = len(shards)
        worker.transfer_start = self.now
        bytes_per = job.profile.param_bytes / len(shards)
        demand_per = job.profile.bw_demand / len(shards)
        for shard in shards:
            servers = (
                (worker.server,)
                if shard.server == worker.server
                else (shard.server, worker.server)
            )
            self._start_activity(
                "flow",
                worker.task_id,
                servers,
                demand_per,
                bytes_per,
                lambda t, w=worker: self._param_push_done(w, t),
            )

    def _param_push_done(self, worker: _Worker, t: float) -> None:
        job = worker.job
        if job.done:
            return
        worker.pending_flows -= 1
        if worker.pending_flows > 0:
            return
        worker.comm_s += t - worker.transfer_start
        self._finish_iteration(worker, t)
        self._start_iteration(worker)
        self._recompute()

    def _finish_iteration(self, worker: _Worker, t: float) -> None:
        """Record the iteration, refresh history, forecast the next one."""
        job = worker.job
        profile = job.profile
        total = worker.preproc_s + worker.compute_s + worker.comm_s
        preproc_work = profile.preproc_work * worker.batch_scale
        cpu_share = (
            preproc_work / worker.preproc_s if worker.preproc_s > 0.0 else profile.cpu_demand
        )
        moved = self._comm_bytes(worker)
        bw_share = moved / worker.comm_s if worker.comm_s > 0.0 else profile.bw_demand
        if self.config.record_iterations:
            job.records.append(
                IterationRecord(
                    job_id=job.spec.id,
                    worker=worker.index,
                    iteration=worker.iteration,
                    preproc_s=worker.preproc_s,
                    compute_s=worker.compute_s,
                    comm_s=worker.comm_s,
                    total_s=total,
                    cpu_share=cpu_share,
                    bw_share=bw_share,
                    predicted_total_s=worker.predicted_current,
                )
            )
        worker.history.append(cpu_share, bw_share, total)
        server = self.world.server(worker.server)
        cpu_hat = self.forecaster.predict_next(
            worker.history.series("cpu"), capacity=server.cpu_capacity
        )
        bw_hat = self.forecaster.predict_next(
            worker.history.series("bw"), capacity=server.bw_capacity
        )
        cpu_hat = max(cpu_hat, 1e-9)
        bw_hat = max(bw_hat, 1e-9)
        phases = phase_durations(
            cpu_hat,
            bw_hat,
            profile,
            comm_bytes=self._comm_bytes(worker),
            batch_scale=worker.batch_scale,
        )
        worker.predicted_next = phases.total
        worker.iteration += 1
        worker.completed += 1
        self._round_bookkeeping(job, t)

    def _comm_bytes(self, worker: _Worker) -> float:
        job = worker.job
        if job.spec.architecture == PS:
            return 2.0 * job.profile.param_bytes
        if worker.index in job.ring:
            n_ring = len(job.ring)
            if n_ring <= 1:
                return 0.0
            return 2.0 * job.profile.param_bytes * (n_ring - 1) / n_ring
        return 2.0 * job.profile.param_bytes

    # -- all-reduce round orchestration ---------------------------------------

    def _start_round(self, job: _Job) -> None:
        if job.done:
            return
        job.round_open = True
        job.ring_pending = set(job.ring)
        job.child_arrived = []
        for index in job.ring:
            self._start_iteration(job.workers[index])
        for child in sorted(job.children):
            self._start_child_round(job, child)
        self._recompute()

    def _start_child_round(self, job: _Job, child: int) -> None:
        worker = job.workers[child]
        parent = job.workers[job.children[child]]
        worker.transfer_start = self.now
        bytes_down = job.profile.param_bytes
        servers = (
            (worker.server,)
            if parent.server == worker.server
            else (parent.server, worker.server)
        )
        self._start_activity(
            "flow",
            worker.task_id,
            servers,
            job.profile.bw_demand,
            bytes_down,
            lambda t, w=worker: self._child_params_received(w, t),
        )

    def _child_params_received(self, worker: _Worker, t: float) -> None:
        if worker.job.done:
            return
        worker.comm_s += t - worker.transfer_start
        # The broadcast time belongs to the iteration the child now starts.
        carry = worker.comm_s
        self._start_iteration(worker)
        worker.comm_s = carry
        self._recompute()

    def _start_ring_or_child_flow(self, worker: _Worker) -> None:
        job = worker.job
        if worker.index in job.ring:
            ring = job.ring
            n_ring = len(ring)
            if n_ring <= 1:
                self._ring_transfer_done(worker, self.now)
                return
            successor = job.workers[ring[(ring.index(worker.index) + 1) % n_ring]]
            bytes_ring = 2.0 * job.profile.param_bytes * (n_ring - 1) / n_ring
            servers = (
                (worker.server,)
                if successor.server == worker.server
                else (worker.server, successor.server)
            )
            self._start_activity(
                "flow",
                worker.task_id,
                servers,
                job.profile.bw_demand,
                bytes_ring,
                lambda t, w=worker: self._ring_transfer_done(w, t),
            )
        else:
            parent = job.workers[job.children[worker.index]]
            servers = (
                (worker.server,)
                if parent.server == worker.server
                else (worker.server, parent.server)
            )
            self._start_activity(
                "flow",
                worker.task_id,
                servers,
                job.profile.bw_demand,
                job.profile.param_bytes,
                lambda t, w=worker: self._child_gradient_done(w, t),
            )
        self._recompute()

    def _ring_transfer_done(self, worker: _Worker, t: float) -> None:
        job = worker.job
        if job.done or not job.round_open:
            return
        worker.comm_s += t - worker.transfer_start
        job.ring_pending.discard(worker.index)
        if worker.index in self._parents(job):
            self.passive[worker.task_id] = (worker.server, job.profile.busy_poll_cores)
            self._recompute()
        if not job.ring_pending:
            mode = job.mode
            assert isinstance(mode, ARRemoval)
            if mode.x > 0 and mode.t_w > 0.0:
                self._push(t + mode.t_w, self._commit_round, (job,))
            else:
                self._commit_round(job)

    def _child_gradient_done(self, worker: _Worker, t: float) -> None:
        job = worker.job
        if job.done or not job.round_open:
            return
        worker.comm_s += t - worker.transfer_start
        worker.waiting_since = t
        job.child_arrived.append(worker.index)

    def _parents(self, job: _Job) -> set[int]:
        return set(job.children.values())

    def _commit_round(self, job: _Job) -> None:
        if job.done or not job.round_open:
            return
        if self.now < job.blocked_until:
            self._push(job.blocked_until, self._commit_round, (job,))
            return
        job.round_open = False
        t = self.now
        for parent_index in sorted(self._parents(job)):
            task_id = job.workers[parent_index].task_id
            if task_id in self.passive:
                del self.passive[task_id]
        arrived = sorted(job.child_arrived)
        late = [c for c in sorted(job.children) if c not in arrived]
        for child in late:
            worker = job.workers[child]
            self._cancel_owner(worker.task_id)
            job.dropped_reports += 1
            worker.iteration += 1  # the aborted iteration still consumes an index
            worker.predicted_current = worker.predicted_next
        reports = len(job.ring) + len(arrived)
        per_worker = job.spec.total_batch / job.spec.num_workers
        batch = (len(job.ring) + len(arrived)) * per_worker
        for index in job.ring:
            self._finish_iteration(job.workers[index], t)
        for child in arrived:
            self._finish_iteration(job.workers[child], t)
        self._credit_progress(job, reports, batch, t)
        if job.done:
            return
        if job.pending_mode is not None:
            self._apply_mode(job, job.pending_mode, t)
            job.pending_mode = None
        self._start_round(job)

    # -- rounds, realized stats, decisions -------------------------------------

    def _round_bookkeeping(self, job: _Job, t: float) -> None:
        while True:
            r = job.finalized_rounds
            group = [w for w in job.workers if w.completed > r]
            if len(group) < job.spec.num_workers:
                break
            times = []
            for w in job.workers:
                record_time = self._round_time(job, w, r)
                times.append(record_time)
            stats = deviation_stats(times)
            flagged = set(classify_stragglers(stats, self.config.straggler_threshold))
            for index, w in enumerate(job.workers):
                if index in flagged:
                    job.straggler_streak_s[index] += times[index]
                else:
                    job.straggler_streak_s[index] = 0.0
            fastest = min(range(len(times)), key=lambda i: (times[i], i))
            slowest = max(range(len(times)), key=lambda i: (times[i], -i))
            if times[fastest] < times[slowest]:
                pair = (fastest, slowest)
                if job.extreme_pair == pair:
                    job.extreme_pair_run += 1
                else:
                    job.extreme_pair = pair
                    job.extreme_pair_run = 1
            else:
                job.extreme_pair = None
                job.extreme_pair_run = 0
            job.last_round_times = tuple(times)
            job.finalized_rounds += 1
        if job.finalized_rounds > job.last_decision_round and not job.done:
            job.last_decision_round = job.finalized_rounds
            self._decision_point(job, t)

    def _round_time(self, job: _Job, worker: _Worker, r: int) -> float:
        # Records are appended in completion order; find this worker's r-th.
        count = 0
        for record in job.records:
            if record.worker == worker.index:
                if count == r:
                    return record.total_s
                count += 1
        # Iteration records disabled: fall back to the live history window.
        series = worker.history.series("total")
        return series[min(r, len(series) - 1)]

    def _decision_point(self, job: _Job, t: float) -> None:
        if self.config.pinned_mode is not None:
            return
        policy = job.policy
        if policy in ("ssgd", "asgd", "sync-switch", "lb-bsp", "lgc") or policy.startswith(
            "static-"
        ):
            self._baseline_decision(job, t)
            return
        if policy in ("adaptive-h", "adaptive-ml", "adaptive-early"):
            self._adaptive_decision(job, t)
            return
        raise DomainError(f"unknown policy {policy!r}")

    def _baseline_decision(self, job: _Job, t: float) -> None:
        obs = PolicyObservation(
            num_workers=job.spec.num_workers,
            architecture=job.spec.architecture,
            straggler_streak_s=tuple(job.straggler_streak_s),
            extreme_pair_run=job.extreme_pair_run,
            fastest_worker=job.extreme_pair[0] if job.extreme_pair else None,
            slowest_worker=job.extreme_pair[1] if job.extreme_pair else None,
            lgc_t_w=self.config.lgc_t_w,
        )
        action = baseline_policy_step(job.policy, obs)
        if isinstance(action, SetMode):
            if action.mode != job.mode:
                self._schedule_mode(job, action.mode, t, basis="realized")
        elif isinstance(action, AdjustBatches):
            for worker_index, delta in action.deltas:
                worker = job.workers[worker_index]
                worker.batch = max(1, worker.batch + delta)
            job.extreme_pair = None
            job.extreme_pair_run = 0

    def _adaptive_decision(self, job: _Job, t: float) -> None:
        predicted = [w.predicted_next for w in job.workers]
        if any(p is None for p in predicted):
            return
        snapshot = DecisionSnapshot.from_predictions(
            predicted,
            model_id=job.profile.name,
            learning_rate=job.lr_base,
            completed_steps=job.steps,
            total_batch=job.spec.total_batch,
            architecture=job.spec.architecture,
            phi=job.phi,
        )
        if job.policy == "adaptive-early":
            effective = job.stale_snapshot or snapshot
            job.stale_snapshot = snapshot
        else:
            effective = snapshot
        self._label_previous_decision(job, t)
        stats = deviation_stats(effective.predicted_times)
        stragglers = classify_stragglers(stats, self.config.straggler_threshold)
        default = (
            ssgd_mode(job.spec.num_workers)
            if job.spec.architecture == PS
            else ARRemoval(0, 0.0)
        )
        if not stragglers:
            if job.mode != default:
                self._schedule_mode(job, default, t, basis="predicted", snapshot=effective)
            job.last_straggler_set = ()
            job.last_selection_round = None
            job.last_decision_state = (effective, default, t)
            return
        round_index = job.finalized_rounds
        unchanged = tuple(stragglers) == job.last_straggler_set
        fresh = (
            job.last_selection_round is not None
            and round_index - job.last_selection_round < self.config.reselect_interval_rounds
        )
        if unchanged and fresh:
            job.last_decision_state = (effective, job.mode, t)
            return
        job.last_straggler_set = tuple(stragglers)
        job.last_selection_round = round_index
        candidates = None
        if job.policy == "adaptive-ml":
            self._maybe_train(job)
            if self.regressor is not None and self.regressor.supports(
                job.spec.architecture
            ):
                candidates = rank_mode_candidates_ml(
                    self.regressor,
                    effective,
                    self.config.tw_grid,
                    self.config.straggler_threshold,
                )
        if candidates is None:
            candidates = rank_mode_candidates(
                effective, self.config.tw_grid, self.config.straggler_threshold
            )
        plan = self._plan_for(job, effective, candidates)
        chosen = plan.chosen.mode if plan.verdict == "accepted" else default
        self._apply_plan_caps(job, plan)
        timing = self.config.timing or _POLICY_TIMING[job.policy]
        if timing == "pause":
            # Selection blocks training; the other variants hide the latency.
            job.decision_overhead_s += self.config.decision_latency
            job.blocked_until = max(job.blocked_until, t + self.config.decision_latency)
        if chosen != job.mode:
            self._schedule_mode(job, chosen, t, basis="predicted", snapshot=effective)
        job.last_decision_state = (effective, chosen, t)

    def _maybe_train(self, job: _Job) -> None:
        if len(self.dataset) >= self.config.min_training_rows:
            self.regressor = train_mode_regressor(
                self.dataset,
                self.config.min_training_rows,
                self.config.straggler_threshold,
            )

    def _label_previous_decision(self, job: _Job, t: float) -> None:
        if job.last_decision_state is None:
            return
        snapshot, mode, since = job.last_decision_state
        gained = 0.0
        for update in reversed(job.updates):
            if update.time_s <= since:
                break
            gained += update.credit
        span = t - since
        if gained > 0.0 and span > 0.0:
            try:
                self.dataset.add(snapshot, mode, span / gained)
            except DomainError:
                pass
        job.last_decision_state = None

    def _plan_for(
        self, job: _Job, snapshot: DecisionSnapshot, candidates: list[ModeCandidate]
    ) -> ReallocationPlan:
        """Resource verification for the candidate list, parameter servers first."""
        need = self._beneficiary_need(job)
        status_quo = self._status_quo_estimate(job, candidates)
        if need is None:
            return ReallocationPlan(
                verdict="accepted",
                chosen=candidates[0],
                deltas=(),
                s_with=candidates[0].est_time,
                s_without=status_quo,
            )
        beneficiary, shortfall_cpu, shortfall_bw = need
        group = self._group_peers(job, beneficiary.server, snapshot)
        victims = self._victims(job, beneficiary.server)
        profile_by_job = {
            j.spec.id: j.profile for j in self.jobs.values() if j.placed and not j.done
        }

        def predict_victim(victim: VictimTask, cpu: float, bw: float) -> float:
            profile = profile_by_job[victim.job_id]
            if cpu <= 0.0 or bw <= 0.0:
                return math.inf
            return phase_durations(cpu, bw, profile).total

        return plan_reallocation(
            BeneficiaryNeed(
                task_id=beneficiary.task_id,
                server_id=beneficiary.server,
                job_id=job.spec.id,
                cpu_shortfall=shortfall_cpu,
                bw_shortfall=shortfall_bw,
            ),
            group,
            victims,
            candidates,
            status_quo,
            predict_victim,
        )

    def _beneficiary_need(self, job: _Job) -> tuple[_PsShard, float, float] | None:
        if job.spec.architecture != PS or not job.ps_shards:
            return None
        worst: tuple[_PsShard, float, float] | None = None
        for shard in job.ps_shards:
            achieved = self._measured_cpu_share(shard)
            wanted = job.profile.ps_cpu_demand * self._multiplier(
                CPU_THROTTLE, None, shard.task_id
            )
            shortfall = max(wanted - achieved, 0.0)
            if shortfall > 1e-9 and (worst is None or shortfall > worst[1]):
                worst = (shard, shortfall, 0.0)
        return worst

    def _measured_cpu_share(self, shard: _PsShard) -> float:
        """What the shard's update demand would receive right now."""
        server = self.world.server(shard.server)
        entries: list[tuple] = [(("probe", shard.task_id), shard.job.profile.ps_cpu_demand)]
        for act in self.activities.values():
            if act.done or act.kind != "cpu" or act.servers[0] != shard.server:
                continue
            entries.append(((("a", act.aid)), self._effective_demand(act)))
        for task_id, (srv, cores) in sorted(self.passive.items()):
            if srv != shard.server or task_id == shard.task_id:
                continue
            entries.append((("p", task_id), cores))
        capacity = server.cpu_capacity * self._multiplier(CPU_THROTTLE, shard.server, None)
        shares = maxmin_allocate(DemandSet(tuple(entries), capacity))
        return shares[("probe", shard.task_id)]

    def _status_quo_estimate(self, job: _Job, candidates: list[ModeCandidate]) -> float:
        for candidate in candidates:
            if candidate.mode == job.mode:
                return candidate.est_time
        for candidate in candidates:
            if candidate.mode == ssgd_mode(job.spec.num_workers):
                return candidate.est_time
        return candidates[0].est_time

    def _group_peers(
        self, job: _Job, server: str, snapshot: DecisionSnapshot
    ) -> list[GroupPeer]:
        peers = []
        for worker in job.workers:
            if worker.server != server or len(worker.history) == 0:
                continue
            cpu = worker.history.series("cpu")[-1]
            bw = worker.history.series("bw")[-1]
            peers.append(
                GroupPeer(
                    worker_id=worker.task_id,
                    predicted_time=snapshot.predicted_times[worker.index],
                    cpu_share=cpu,
                    bw_share=bw,
                    profile=job.profile,
                    comm_bytes=self._comm_bytes(worker),
                    batch_scale=worker.batch_scale,
                )
            )
        return peers

    def _victims(self, job: _Job, server: str) -> list[VictimTask]:
        victims = []
        for other in self.jobs.values():
            if other.spec.id == job.spec.id or not other.placed or other.done:
                continue
            gain = max(other.accuracy_gain(), 0.0)
            s_cpu = other.profile.sensitivity_cpu.sensitivity()
            s_bw = other.profile.sensitivity_bw.sensitivity()
            for worker in other.workers:
                if worker.server != server or len(worker.history) == 0:
                    continue
                victims.append(
                    VictimTask(
                        task_id=worker.task_id,
                        server_id=server,
                        job_id=other.spec.id,
                        cpu_share=worker.history.series("cpu")[-1],
                        bw_share=worker.history.series("bw")[-1],
                        sensitivity_cpu=s_cpu,
                        sensitivity_bw=s_bw,
                        accuracy_gain=gain,
                    )
                )
        return victims

    def _apply_plan_caps(self, job: _Job, plan: ReallocationPlan) -> None:
        job.plan_caps = {}
        if plan.verdict != "accepted":
            return
        for delta in plan.deltas:
            if delta.cpu < 0.0 or delta.bw < 0.0:
                owner_job = self.jobs.get(delta.task_id.split(":", 1)[0])
                if owner_job is None:
                    continue
                current = self._donor_current_shares(delta.task_id)
                cap_cpu = current[0] + delta.cpu if delta.cpu < 0.0 else -1.0
                cap_bw = current[1] + delta.bw if delta.bw < 0.0 else -1.0
                owner_job.plan_caps[delta.task_id] = (max(cap_cpu, 0.0) if cap_cpu >= 0.0 else -1.0,
                                                      max(cap_bw, 0.0) if cap_bw >= 0.0 else -1.0)

    def _donor_current_shares(self, task_id: str) -> tuple[float, float]:
        job = self.jobs.get(task_id.split(":", 1)[0])
        if job is not None:
            for worker in job.workers:
                if worker.task_id == task_id and len(worker.history) > 0:
                    return (
                        worker.history.series("cpu")[-1],
                        worker.history.series("bw")[-1],
                    )
        return (0.0, 0.0)

    def _schedule_mode(
        self,
        job: _Job,
        mode: SyncMode,
        t: float,
        basis: str,
        snapshot: DecisionSnapshot | None = None,
    ) -> None:
        if job.spec.architecture == ALL_REDUCE:
            # Ring membership changes between rounds.
            job.pending_mode = mode
            job._membership_basis = (basis, snapshot)  # type: ignore[attr-defined]
            if not job.round_open:
                self._apply_mode(job, mode, t)
                job.pending_mode = None
        else:
            self._apply_mode(job, mode, t)

    def _apply_mode(self, job: _Job, mode: SyncMode, t: float) -> None:
        if job.spec.architecture == PS:
            job.mode = mode
            job.lr_applied = mode_learning_rates(mode, job.spec.num_workers, job.lr_base)
            self._pool_reports(job)
        else:
            basis, snapshot = getattr(job, "_membership_basis", ("realized", None))
            self._apply_ar_membership(job, mode, snapshot)
            job.lr_applied = mode_learning_rates(mode, job.spec.num_workers, job.lr_base)

    def _apply_ar_membership(
        self, job: _Job, mode: SyncMode, snapshot: DecisionSnapshot | None
    ) -> None:
        assert isinstance(mode, ARRemoval)
        job.mode = mode
        n = job.spec.num_workers
        if mode.x == 0:
            job.ring = tuple(range(n))
            job.children = {}
            return
        if snapshot is not None:
            times = snapshot.predicted_times
        elif job.last_round_times is not None:
            times = job.last_round_times
        else:
            times = tuple([1.0] * n)
        order = sorted(range(n), key=lambda i: (times[i], i))
        ring = tuple(sorted(order[: n - mode.x]))
        removed = sorted(order[n - mode.x :])
        job.ring = ring
        job.children = {}
        counts = {r: 0 for r in ring}
        for child in removed:
            child_server = self.world.server(job.workers[child].server)
            peers = []
            for r in ring:
                ring_server = self.world.server(job.workers[r].server)
                pair_bw = min(child_server.bw_capacity, ring_server.bw_capacity)
                peers.append(
                    RingPeer(
                        worker_id=f"{r:06d}", bandwidth=pair_bw, child_count=counts[r]
                    )
                )
            parent = int(assign_child_parent(peers))
            job.children[child] = parent
            counts[parent] += 1

    # -- job lifecycle ----------------------------------------------------------

    def _finish_job(self, job: _Job) -> None:
        job.done = True
        for worker in job.workers:
            self._cancel_owner(worker.task_id)
            self.gpu_free[worker.server] += 1
        for shard in job.ps_shards:
            self._cancel_owner(shard.task_id)
            if shard.task_id in self.passive:
                del self.passive[shard.task_id]
        job.unconsumed = []
        job.update_queue = []
        self._try_place_pending()
        self._recompute()

    # -- main loop ----------------------------------------------------------------

    def run(self) -> RunMetrics:
        horizon = self.config.horizon_s
        while self.heap:
            time, _, fn, args = heapq.heappop(self.heap)
            if time > horizon:
                self.now = horizon
                break
            self._advance_to(time)
            fn(*args)
            self._recompute()
            if all(job.done for job in self.jobs.values()):
                break
        return self._collect()

    def _collect(self) -> RunMetrics:
        run = RunMetrics(
            seed=self.seed,
            policy="mixed",
            horizon_s=self.config.horizon_s,
        )
        policies = {job.policy for job in self.jobs.values()}
        if len(policies) == 1:
            run.policy = next(iter(policies))
        for job_id in sorted(self.jobs):
            job = self.jobs[job_id]
            metrics_mod.finalize_straggler_flags(
                job.records, self.config.straggler_threshold
            )
            quality = metrics_mod.prediction_quality(job.records)
            if isinstance(job.lr_applied, tuple):
                final_lr = max(job.lr_applied)
            else:
                final_lr = job.lr_applied
            run.jobs.append(
                JobMetrics(
                    job_id=job.spec.id,
                    policy=job.policy,
                    seed=self.seed,
                    tta_s=job.tta_s,
                    jct_s=job.jct_s,
                    straggler_iterations=metrics_mod.straggler_iteration_count(job.records),
                    predictor_fp=quality.false_positives,
                    predictor_fn=quality.false_negatives,
                    decision_overhead_s=job.decision_overhead_s,
                    incomplete=not job.done,
                    progress=job.progress,
                    update_count=len(job.updates),
                    dropped_reports=job.dropped_reports,
                    final_learning_rate=final_lr,
                    records=job.records,
                    updates=job.updates,
                )
            )
        return run


def run_simulation(
    world: WorldSpec,
    perturbations: Sequence[Perturbation] = (),
    policy: str | None = None,
    seed: int = 0,
    config: EngineConfig | None = None,
) -> RunMetrics:
    """Simulate every job in the world; returns per-job metrics.

    ``policy`` overrides all jobs' trace policies when given. An empty job
    list yields empty metrics. The same inputs always produce the same
    output, byte for byte after export.
    """
    engine = _Engine(world, perturbations, policy, seed, config or EngineConfig())
    return engine.run()
