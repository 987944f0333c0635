"""Resource allocation and the share/duration mapping.

A server's CPU cores and NIC bandwidth are shared max-min fairly among the
tasks demanding them. Allocation is recomputed only at event boundaries, so
between events every rate is constant and phase durations follow from plain
division.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

from .domain import DomainError, ModelProfile


class StarvedShare(RuntimeError):
    """A phase received a zero share and can make no progress."""


class InfeasibleTarget(ValueError):
    """No share assignment can achieve the requested iteration time."""


@dataclass(frozen=True)
class DemandSet:
    """Demands against one resource: (task id, requested rate) plus capacity."""

    entries: tuple[tuple[Hashable, float], ...]
    capacity: float

    def __post_init__(self) -> None:
        if self.capacity < 0.0 or not math.isfinite(self.capacity):
            raise DomainError("capacity must be finite and non-negative")
        seen: set[Hashable] = set()
        for task, demand in self.entries:
            if task in seen:
                raise DomainError(f"duplicate demand entry for task {task!r}")
            seen.add(task)
            if demand < 0.0 or not math.isfinite(demand):
                raise DomainError(f"demand for task {task!r} must be finite and non-negative")


def maxmin_allocate(demands: DemandSet) -> dict[Hashable, float]:
    """Max-min fair shares by water-filling.

    Tasks demanding less than the fair level keep their demand; the freed
    capacity is redistributed among the rest by raising the level. No task
    receives more than it asked for, and capacity is never oversubscribed.
    The result depends only on the multiset of demands, not entry order.
    """
    shares: dict[Hashable, float] = {task: 0.0 for task, _ in demands.entries}
    pending = sorted(demands.entries, key=lambda e: e[1])
    remaining = demands.capacity
    index = 0
    while index < len(pending):
        level = remaining / (len(pending) - index)
        task, demand = pending[index]
        if demand <= level:
            shares[task] = demand
            remaining -= demand
        else:
            # Everyone left demands more than the level: split evenly.
            for task, _ in pending[index:]:
                shares[task] = level
            remaining = 0.0
            break
        index += 1
    return shares


@dataclass(frozen=True)
class PhaseBreakdown:
    """Durations of the three phases of one worker iteration."""

    preproc: float
    compute: float
    comm: float

    @property
    def total(self) -> float:
        return self.preproc + self.compute + self.comm


def phase_durations(
    cpu_share: float,
    bw_share: float,
    profile: ModelProfile,
    comm_bytes: float | None = None,
    batch_scale: float = 1.0,
) -> PhaseBreakdown:
    """Iteration phase times for a worker receiving the given shares.

    Pre-processing is CPU work over the CPU share, compute is the fixed GPU
    time, communication is bytes over the bandwidth share. ``comm_bytes``
    defaults to gradients up plus parameters down (2x the parameter size);
    callers override it when a tree route or ring segment changes the volume.
    ``batch_scale`` scales the batch-proportional work terms for workers
    running an adjusted batch size.

    A zero share with nonzero work is a starved phase and raises
    :class:`StarvedShare` instead of returning infinity.
    """
    if batch_scale <= 0.0:
        raise DomainError("batch_scale must be positive")
    preproc_work = profile.preproc_work * batch_scale
    bytes_to_move = profile.comm_bytes_default() if comm_bytes is None else comm_bytes
    if preproc_work > 0.0 and cpu_share <= 0.0:
        raise StarvedShare("preproc phase starved: zero CPU share")
    if bytes_to_move > 0.0 and bw_share <= 0.0:
        raise StarvedShare("comm phase starved: zero bandwidth share")
    preproc = preproc_work / cpu_share if preproc_work > 0.0 else 0.0
    comm = bytes_to_move / bw_share if bytes_to_move > 0.0 else 0.0
    compute = profile.gpu_compute_time * batch_scale
    return PhaseBreakdown(preproc=preproc, compute=compute, comm=comm)


def invert_phase(
    target_total: float,
    profile: ModelProfile,
    comm_bytes: float | None = None,
    batch_scale: float = 1.0,
) -> tuple[float, float]:
    """Minimal (cpu_share, bw_share) whose iteration takes ``target_total``.

    The GPU phase is incompressible, so the slack over the uncontended CPU
    and communication durations is split proportionally to those durations:
    both phases stretch by the same factor, which is the unique assignment
    that hits the target while lowering each share as little as possible.
    """
    preproc_work = profile.preproc_work * batch_scale
    bytes_to_move = profile.comm_bytes_default() if comm_bytes is None else comm_bytes
    compute = profile.gpu_compute_time * batch_scale
    if target_total <= compute:
        raise InfeasibleTarget(
            f"target {target_total!r} not above the incompressible GPU time {compute!r}"
        )
    preproc0 = preproc_work / profile.cpu_demand if preproc_work > 0.0 else 0.0
    comm0 = bytes_to_move / profile.bw_demand if bytes_to_move > 0.0 else 0.0
    elastic = preproc0 + comm0
    if elastic == 0.0:
        raise InfeasibleTarget("no elastic phase: only the GPU phase consumes time")
    stretch = (target_total - compute) / elastic
    return profile.cpu_demand / stretch, profile.bw_demand / stretch


def allocation_report(
    demands: DemandSet, shares: Mapping[Hashable, float]
) -> dict[str, float]:
    """Small audit summary used by tests and debug dumps."""
    total = math.fsum(shares.values())
    unmet = 0.0
    for task, demand in demands.entries:
        unmet += max(0.0, demand - shares.get(task, 0.0))
    return {
        "allocated": total,
        "capacity": demands.capacity,
        "unmet_demand": unmet,
    }
