"""Resource-aware straggler prevention.

When the selector picks a mode that leaves a task short of CPU or bandwidth,
this module builds a re-assignment plan in two stages: first it harvests
slack from same-group peers that would otherwise finish early and wait at
the barrier, then it takes the remainder from co-located tasks of other
jobs, splitting the cut inversely to how sensitive each victim is. A plan is
applied only when the summed predicted iteration times of everyone impacted
improve; otherwise the next-ranked mode is tried.

The module also owns the placement heuristics: parameter-server spreading,
parent selection for removed all-reduce workers, and latency-layered
communication trees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .decisions import ModeCandidate
from .domain import SENSITIVITY_FLOOR, DomainError, ModelProfile
from .resources import InfeasibleTarget, invert_phase


class PlacementError(RuntimeError):
    """No server can host the task; surfaced to the scheduler."""


@dataclass(frozen=True)
class GroupPeer:
    """A same-job worker co-located with the beneficiary."""

    worker_id: str
    predicted_time: float
    cpu_share: float
    bw_share: float
    profile: ModelProfile
    comm_bytes: float | None = None
    batch_scale: float = 1.0


def slack_from_fast_peers(
    peers: Sequence[GroupPeer], target: float | None = None
) -> dict[str, tuple[float, float]]:
    """Harvestable (cpu, bw) slack per peer.

    Peers faster than the group target can be slowed to finish exactly at the
    target without moving the barrier. Slack is the peer's current share
    minus the minimal share that still hits the target, floored at zero per
    resource.
    """
    if not peers:
        return {}
    group_target = max(p.predicted_time for p in peers) if target is None else target
    slack: dict[str, tuple[float, float]] = {}
    for peer in peers:
        if peer.predicted_time >= group_target:
            slack[peer.worker_id] = (0.0, 0.0)
            continue
        try:
            need_cpu, need_bw = invert_phase(
                group_target,
                peer.profile,
                comm_bytes=peer.comm_bytes,
                batch_scale=peer.batch_scale,
            )
        except InfeasibleTarget:
            slack[peer.worker_id] = (0.0, 0.0)
            continue
        slack[peer.worker_id] = (
            max(peer.cpu_share - need_cpu, 0.0),
            max(peer.bw_share - need_bw, 0.0),
        )
    return slack


def sensitivity_weighted_split(
    shortfall: float, weights: Sequence[tuple[float, float]], floor: float = SENSITIVITY_FLOOR
) -> list[float]:
    """Split ``shortfall`` across victims, each weighted by 1 / (S * A).

    ``weights`` holds (sensitivity, accuracy_gain) per victim; less sensitive
    and slower-improving jobs give up more. Factors are floored so the split
    stays finite.
    """
    if shortfall < 0.0:
        raise DomainError("shortfall cannot be negative")
    if not weights:
        raise DomainError("need at least one victim to split across")
    inverse = [1.0 / (max(s, floor) * max(a, floor)) for s, a in weights]
    total = math.fsum(inverse)
    return [shortfall * w / total for w in inverse]


@dataclass(frozen=True)
class VictimTask:
    """A co-located task of another job, a stage-2 reduction candidate."""

    task_id: str
    server_id: str
    job_id: str
    cpu_share: float
    bw_share: float
    sensitivity_cpu: float
    sensitivity_bw: float
    accuracy_gain: float


@dataclass(frozen=True)
class BeneficiaryNeed:
    """The under-resourced task and what it is missing."""

    task_id: str
    server_id: str
    job_id: str
    cpu_shortfall: float
    bw_shortfall: float


@dataclass(frozen=True)
class ResourceDelta:
    """Share change applied to one task; negative values are donations."""

    task_id: str
    server_id: str
    cpu: float
    bw: float


@dataclass(frozen=True)
class ReallocationPlan:
    verdict: str  # "accepted" or "rejected"
    chosen: ModeCandidate | None
    deltas: tuple[ResourceDelta, ...]
    s_with: float
    s_without: float


def _build_deltas(
    need: BeneficiaryNeed,
    group: Sequence[GroupPeer],
    victims: Sequence[VictimTask],
    floor: float,
) -> tuple[list[ResourceDelta], list[tuple[VictimTask, float, float]]] | None:
    """Stage-1 plus stage-2 donations, or None when infeasible."""
    remaining_cpu = need.cpu_shortfall
    remaining_bw = need.bw_shortfall
    deltas: list[ResourceDelta] = []
    slack = slack_from_fast_peers(group)
    for peer in sorted(group, key=lambda p: (p.predicted_time, p.worker_id)):
        cpu_slack, bw_slack = slack.get(peer.worker_id, (0.0, 0.0))
        take_cpu = min(cpu_slack, remaining_cpu)
        take_bw = min(bw_slack, remaining_bw)
        if take_cpu > 0.0 or take_bw > 0.0:
            deltas.append(
                ResourceDelta(peer.worker_id, need.server_id, -take_cpu, -take_bw)
            )
            remaining_cpu -= take_cpu
            remaining_bw -= take_bw
    victim_cuts: list[tuple[VictimTask, float, float]] = []
    if remaining_cpu > 0.0 or remaining_bw > 0.0:
        if not victims:
            return None
        cpu_cuts = (
            sensitivity_weighted_split(
                remaining_cpu,
                [(v.sensitivity_cpu, v.accuracy_gain) for v in victims],
                floor,
            )
            if remaining_cpu > 0.0
            else [0.0] * len(victims)
        )
        bw_cuts = (
            sensitivity_weighted_split(
                remaining_bw,
                [(v.sensitivity_bw, v.accuracy_gain) for v in victims],
                floor,
            )
            if remaining_bw > 0.0
            else [0.0] * len(victims)
        )
        for victim, cpu_cut, bw_cut in zip(victims, cpu_cuts, bw_cuts):
            if cpu_cut > victim.cpu_share or bw_cut > victim.bw_share:
                return None  # a victim cannot give what it does not have
            victim_cuts.append((victim, cpu_cut, bw_cut))
            if cpu_cut > 0.0 or bw_cut > 0.0:
                deltas.append(
                    ResourceDelta(victim.task_id, victim.server_id, -cpu_cut, -bw_cut)
                )
    granted_cpu = need.cpu_shortfall - max(remaining_cpu, 0.0) + sum(
        c for _, c, _ in victim_cuts
    )
    granted_bw = need.bw_shortfall - max(remaining_bw, 0.0) + sum(
        b for _, _, b in victim_cuts
    )
    deltas.append(ResourceDelta(need.task_id, need.server_id, granted_cpu, granted_bw))
    return deltas, victim_cuts


def plan_reallocation(
    need: BeneficiaryNeed,
    group: Sequence[GroupPeer],
    victims: Sequence[VictimTask],
    candidates: Sequence[ModeCandidate],
    status_quo_time: float,
    predict_victim_time: Callable[[VictimTask, float, float], float],
    floor: float = SENSITIVITY_FLOOR,
) -> ReallocationPlan:
    """Plan donations for the best acceptable candidate mode.

    Candidates are tried best-first. For each, the plan donates stage-1
    slack and stage-2 sensitivity-weighted cuts toward the shortfall, then
    compares the summed predicted times of the impacted jobs with the plan
    (S_w: the candidate's estimate plus every victim's slowed time) against
    without it (S_o: the status-quo estimate plus every victim's current
    time). Strict improvement accepts; otherwise the next candidate is
    tried, and with none left the caller keeps the fully synchronous mode.
    Same-job stage-1 donors are delayed only up to the group barrier, so
    they do not enter the sums.
    """
    built = _build_deltas(need, group, victims, floor)
    for candidate in candidates:
        if built is None:
            continue
        deltas, victim_cuts = built
        s_without = status_quo_time + math.fsum(
            predict_victim_time(v, v.cpu_share, v.bw_share) for v, _, _ in victim_cuts
        )
        s_with = candidate.est_time + math.fsum(
            predict_victim_time(v, v.cpu_share - dc, v.bw_share - db)
            for v, dc, db in victim_cuts
        )
        if s_with < s_without:
            return ReallocationPlan(
                verdict="accepted",
                chosen=candidate,
                deltas=tuple(deltas),
                s_with=s_with,
                s_without=s_without,
            )
    return ReallocationPlan(
        verdict="rejected", chosen=None, deltas=(), s_with=math.nan, s_without=math.nan
    )


# --- placement -------------------------------------------------------------


@dataclass(frozen=True)
class ServerLoad:
    """Placement view of one server."""

    id: str
    ps_count: int
    cpu_headroom: float
    bw_headroom: float
    cpu_capacity: float
    bw_capacity: float


def place_high_load_task(
    cpu_need: float, bw_need: float, servers: Sequence[ServerLoad]
) -> str:
    """Server for a resource-heavy task (a parameter server).

    Feasible servers are those whose headroom covers both needs. Among them,
    the fewest already-placed parameter servers wins, then the largest
    combined headroom (each resource normalized by capacity), then the
    lowest id.
    """
    feasible = [
        s
        for s in servers
        if s.cpu_headroom >= cpu_need and s.bw_headroom >= bw_need
    ]
    if not feasible:
        raise PlacementError("no server has headroom for the task")

    def key(s: ServerLoad) -> tuple:
        combined = s.cpu_headroom / s.cpu_capacity + s.bw_headroom / s.bw_capacity
        return (s.ps_count, -combined, s.id)

    return min(feasible, key=key).id


@dataclass(frozen=True)
class RingPeer:
    """A ring worker considered as a parent for a removed worker."""

    worker_id: str
    bandwidth: float
    child_count: int


def assign_child_parent(peers: Sequence[RingPeer]) -> str:
    """Parent for a removed worker.

    Only ring workers in the top bandwidth quartile are candidates (at least
    one always qualifies). Among candidates: fewest children, then highest
    bandwidth, then lowest id.
    """
    if not peers:
        raise DomainError("a removed worker needs at least one ring peer")
    values = np.asarray([p.bandwidth for p in peers], dtype=float)
    cutoff = float(np.quantile(values, 0.75))
    candidates = [p for p in peers if p.bandwidth >= cutoff]
    return min(candidates, key=lambda p: (p.child_count, -p.bandwidth, p.worker_id)).worker_id


# --- communication trees ----------------------------------------------------


@dataclass(frozen=True)
class CommTree:
    """Latency-layered aggregation tree rooted at the parameter server."""

    root: str
    parent: Mapping[str, str]
    children: Mapping[str, tuple[str, ...]]
    depth: Mapping[str, int]
    edge_latency: Mapping[str, float]

    @property
    def nodes(self) -> tuple[str, ...]:
        return tuple(self.depth)

    def max_depth(self) -> int:
        return max(self.depth.values(), default=0)


def build_comm_tree(
    root: str, workers: Sequence[tuple[str, float]], branching: int = 2
) -> CommTree:
    """Tree over ``workers`` = (id, latency to root), branching factor b.

    Workers are sorted by ascending latency and packed breadth-first: the b
    lowest-latency workers attach to the root, the next b to the first of
    those, and so on. Lower-latency workers therefore sit closer to the
    root. With b >= N the tree degenerates to a star. Each edge carries the
    child's latency.
    """
    if branching < 1:
        raise DomainError("branching factor must be positive")
    if not workers:
        raise DomainError("cannot build a tree without workers")
    ids = [w for w, _ in workers]
    if len(set(ids)) != len(ids) or root in ids:
        raise DomainError("worker ids must be unique and distinct from the root")
    ordered = sorted(workers, key=lambda w: (w[1], w[0]))
    parent: dict[str, str] = {}
    children: dict[str, list[str]] = {root: []}
    depth: dict[str, int] = {root: 0}
    edge_latency: dict[str, float] = {}
    for i, (worker, latency) in enumerate(ordered):
        if i < branching:
            p = root
        else:
            p = ordered[(i - branching) // branching][0]
        parent[worker] = p
        children.setdefault(p, []).append(worker)
        children.setdefault(worker, [])
        depth[worker] = depth[p] + 1
        edge_latency[worker] = latency
    return CommTree(
        root=root,
        parent=parent,
        children={k: tuple(v) for k, v in children.items()},
        depth=depth,
        edge_latency=edge_latency,
    )
