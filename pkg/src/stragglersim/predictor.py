"""Straggler prediction: share forecasting and iteration-time estimation.

Each worker keeps a sliding window of per-iteration observations. The next
iteration's CPU and bandwidth shares are forecast with a least-squares
autoregression over the window, and the shares are mapped to a predicted
iteration time through the same phase model the engine runs. Deviations of
the predicted times across a job's workers identify next-iteration
stragglers before they happen.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .domain import STRAGGLER_THRESHOLD, DomainError, ModelProfile
from .resources import phase_durations

CPU = "cpu"
BW = "bw"

#: Autoregression order for the one-step share forecast.
AR_ORDER = 3

#: Default number of iterations the history window retains.
HISTORY_CAPACITY = 100


@dataclass
class HistoryWindow:
    """Ring buffer of (cpu_share, bw_share, total_s) per completed iteration."""

    capacity: int = HISTORY_CAPACITY
    _cpu: deque = field(init=False, repr=False)
    _bw: deque = field(init=False, repr=False)
    _total: deque = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise DomainError("history capacity must be positive")
        self._cpu = deque(maxlen=self.capacity)
        self._bw = deque(maxlen=self.capacity)
        self._total = deque(maxlen=self.capacity)

    def append(self, cpu_share: float, bw_share: float, total_s: float) -> None:
        self._cpu.append(float(cpu_share))
        self._bw.append(float(bw_share))
        self._total.append(float(total_s))

    def series(self, channel: str) -> tuple[float, ...]:
        if channel == CPU:
            return tuple(self._cpu)
        if channel == BW:
            return tuple(self._bw)
        if channel == "total":
            return tuple(self._total)
        raise DomainError(f"unknown channel {channel!r}")

    def __len__(self) -> int:
        return len(self._total)


class ShareForecaster:
    """One-step share forecast, least-squares autoregression of order p.

    With fewer than p + 1 observations there is nothing to regress on and the
    last observation is returned unchanged. Predictions are clamped to
    [0, capacity]: a share can be neither negative nor above the resource.
    The interface is a plain fit-free predict so alternative forecasters can
    be swapped in behind the same call.
    """

    def __init__(self, order: int = AR_ORDER):
        if order < 1:
            raise DomainError("autoregression order must be positive")
        self.order = order

    def predict_next(self, series: Sequence[float], capacity: float = math.inf) -> float:
        values = [float(v) for v in series]
        if not values:
            raise DomainError("cannot forecast from an empty series")
        if len(values) < self.order + 1:
            prediction = values[-1]
        else:
            p = self.order
            rows = []
            targets = []
            for t in range(p, len(values)):
                rows.append(values[t - p : t][::-1] + [1.0])
                targets.append(values[t])
            design = np.asarray(rows, dtype=float)
            y = np.asarray(targets, dtype=float)
            coef, *_ = np.linalg.lstsq(design, y, rcond=None)
            latest = np.asarray(values[-1 : -p - 1 : -1] + [1.0], dtype=float)
            prediction = float(latest @ coef)
        return min(max(prediction, 0.0), capacity)


_DEFAULT_FORECASTER = ShareForecaster()


def forecast_resource(
    history: HistoryWindow,
    channel: str,
    capacity: float = math.inf,
    forecaster: ShareForecaster | None = None,
) -> float:
    """Predicted next-iteration share for one resource channel."""
    fc = forecaster or _DEFAULT_FORECASTER
    return fc.predict_next(history.series(channel), capacity=capacity)


def predict_iteration_time(
    cpu_share: float,
    bw_share: float,
    profile: ModelProfile,
    comm_bytes: float | None = None,
    batch_scale: float = 1.0,
) -> tuple[float, float]:
    """(total time, time until GPU compute finishes) under the given shares.

    Starved shares propagate: the phase model raises rather than returning
    an infinite duration.
    """
    phases = phase_durations(
        cpu_share, bw_share, profile, comm_bytes=comm_bytes, batch_scale=batch_scale
    )
    return phases.total, phases.preproc + phases.compute


class OnlineTimeRegressor:
    """Linear map from (1/cpu_share, comm_bytes/bw_share, batch) to time.

    A model-free alternative to the calibrated phase model: with noiseless
    observations the fitted coefficients recover (preproc_work, 1, 0) with
    the GPU time as intercept.
    """

    def __init__(self) -> None:
        self._rows: list[list[float]] = []
        self._targets: list[float] = []
        self._coef: np.ndarray | None = None

    def observe(
        self, cpu_share: float, bw_share: float, comm_bytes: float, batch: float, total_s: float
    ) -> None:
        if cpu_share <= 0.0 or bw_share <= 0.0:
            raise DomainError("observations need positive shares")
        self._rows.append([1.0 / cpu_share, comm_bytes / bw_share, float(batch), 1.0])
        self._targets.append(float(total_s))
        self._coef = None

    def fit(self) -> np.ndarray:
        if len(self._rows) < 2:
            raise DomainError("need at least two observations to fit")
        design = np.asarray(self._rows, dtype=float)
        y = np.asarray(self._targets, dtype=float)
        self._coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        return self._coef

    def predict(self, cpu_share: float, bw_share: float, comm_bytes: float, batch: float) -> float:
        if self._coef is None:
            self.fit()
        row = np.asarray([1.0 / cpu_share, comm_bytes / bw_share, float(batch), 1.0])
        return float(row @ self._coef)

    @property
    def coefficients(self) -> tuple[float, ...]:
        if self._coef is None:
            self.fit()
        return tuple(float(c) for c in self._coef)


@dataclass(frozen=True)
class DeviationStats:
    """Per-worker relative deviations for one iteration.

    ``deviations[i]`` is (T_i - min T) / min T; ``spread`` is max T - min T
    and ``spread_ratio`` is spread / min T.
    """

    deviations: tuple[float, ...]
    spread: float
    spread_ratio: float


def deviation_stats(times: Sequence[float]) -> DeviationStats:
    """Deviation statistics over one iteration's per-worker times."""
    if not times:
        raise DomainError("deviation stats need at least one time")
    values = [float(t) for t in times]
    fastest = min(values)
    slowest = max(values)
    if fastest <= 0.0:
        raise DomainError("iteration times must be positive")
    deviations = tuple((t - fastest) / fastest for t in values)
    return DeviationStats(
        deviations=deviations,
        spread=slowest - fastest,
        spread_ratio=(slowest - fastest) / fastest,
    )


def classify_stragglers(
    stats: DeviationStats, threshold: float = STRAGGLER_THRESHOLD
) -> tuple[int, ...]:
    """Indices whose deviation strictly exceeds the threshold, ascending."""
    return tuple(i for i, d in enumerate(stats.deviations) if d > threshold)


def predicted_straggler_set(
    predicted_times: Sequence[float], threshold: float = STRAGGLER_THRESHOLD
) -> tuple[int, ...]:
    """Convenience wrapper: classify stragglers from predicted times."""
    return classify_stragglers(deviation_stats(predicted_times), threshold)
