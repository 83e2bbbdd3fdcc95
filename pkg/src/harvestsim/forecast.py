"""Harvest prediction: exponential smoothing and a seasonal trend model.

Two one-step-ahead predictors over per-slot energy series:

* plain exponentially weighted moving average (EWMA): the next forecast is
  ``eps * measured + (1 - eps) * previous_forecast``;
* multiplicative triple smoothing (level, trend, seasonal-index ring), which
  tracks series shaped like ``(a + b*t) * s(t mod l)`` and therefore adapts
  to diurnal shape and day-to-day weather swings that defeat the EWMA.

Both are pure functions over explicit state values: a step returns the next
prediction together with the successor state, leaving its input untouched.

Zero measurements (night slots) freeze the seasonal-model state: updating the
level against a zero sample would geometrically collapse it within a handful
of slots and poison the ratio updates at sunrise, so the ring position
advances while level/trend/indices are retained. Parameter fitting treats
state that still degenerates (negative trend driving the level below the
epsilon floor) as an infinite-error candidate instead of aborting the search.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

EPS_FLOOR = 1e-9


class ForecastError(Exception):
    """Base class for predictor errors."""


class HistoryTooShort(ForecastError):
    """Initialization needs at least two full seasonal periods."""


class EmptyInput(ForecastError):
    """A series or parameter grid was empty."""


class DivisionDegenerate(ForecastError):
    """A level or seasonal index underflowed the epsilon floor before division."""


def _check_weight(value: float, name: str, allow_zero: bool = False) -> float:
    lo_ok = value >= 0.0 if allow_zero else value > 0.0
    if not (lo_ok and value < 1.0):
        bounds = "[0,1)" if allow_zero else "(0,1)"
        raise ValueError(f"{name} must lie in {bounds}, got {value}")
    return float(value)


@dataclass(frozen=True)
class EwmaState:
    """Scalar smoothing state: current one-step prediction and weight."""

    prediction: float
    epsilon: float = 0.5

    def __post_init__(self) -> None:
        _check_weight(self.epsilon, "epsilon")


def ewma_init(first_measurement: float, epsilon: float = 0.5) -> EwmaState:
    """Seed the smoother with the first observed value."""
    return EwmaState(prediction=float(first_measurement), epsilon=epsilon)


def ewma_step(state: EwmaState, measured: float) -> tuple[float, EwmaState]:
    """Consume one measurement; return the next-slot prediction and new state."""
    pred = state.epsilon * measured + (1.0 - state.epsilon) * state.prediction
    return pred, replace(state, prediction=pred)


@dataclass(frozen=True)
class HwState:
    """Level/trend/seasonal state for the multiplicative model.

    ``seasonal`` holds one index per period position; ``position`` is the
    ring slot of the *next* measurement to be consumed.
    """

    level: float
    trend: float
    seasonal: tuple[float, ...]
    epsilon: float = 0.906
    beta: float = 0.1  # seasonal-index smoothing; 0 freezes the ring
    gamma: float = 0.650  # trend smoothing; 0 freezes the trend
    position: int = 0

    def __post_init__(self) -> None:
        _check_weight(self.epsilon, "epsilon")
        _check_weight(self.beta, "beta", allow_zero=True)
        _check_weight(self.gamma, "gamma", allow_zero=True)
        if len(self.seasonal) < 2:
            raise ValueError("seasonal ring needs length >= 2")
        if any(i <= 0 for i in self.seasonal):
            raise ValueError("seasonal indices must be positive")
        if not (0 <= self.position < len(self.seasonal)):
            raise ValueError("position outside seasonal ring")

    @property
    def period(self) -> int:
        return len(self.seasonal)


def hw_init(
    history: list[float] | tuple[float, ...],
    period: int,
    epsilon: float = 0.906,
    beta: float = 0.1,
    gamma: float = 0.650,
) -> HwState:
    """Bootstrap the state from at least two full periods of history.

    Level is the first-period mean, trend the per-slot drift between the
    first two period means, and each seasonal index the mean of its phase
    over the whole history relative to the grand mean (normalized to average
    one, floored at EPS_FLOOR so all-dark phases stay usable as divisors).
    """
    if period < 2:
        raise ValueError("period must be >= 2")
    if len(history) < 2 * period:
        raise HistoryTooShort(
            f"need at least {2 * period} samples for period {period}, got {len(history)}"
        )
    first = sum(history[:period]) / period
    second = sum(history[period : 2 * period]) / period
    grand = sum(history) / len(history)
    if grand <= 0:
        raise DivisionDegenerate("history mean is zero; seasonal ratios undefined")
    raw = []
    for i in range(period):
        phase = history[i::period]
        raw.append((sum(phase) / len(phase)) / grand)
    mean_index = sum(raw) / period
    seasonal = tuple(max(r / mean_index, EPS_FLOOR) for r in raw)
    return HwState(
        level=first,
        trend=(second - first) / period,
        seasonal=seasonal,
        epsilon=epsilon,
        beta=beta,
        gamma=gamma,
        position=len(history) % period,
    )


def hw_step(state: HwState, measured: float) -> tuple[float, HwState]:
    """Consume one measurement and return (next prediction, new state).

    The measurement belongs to ring slot ``state.position``. Zero (or
    negative) measurements advance the position but freeze level, trend and
    the seasonal ring.
    """
    l = state.period
    pos = state.position
    next_pos = (pos + 1) % l
    if measured <= 0.0:
        new = replace(state, position=next_pos)
        return (new.level + new.trend) * new.seasonal[next_pos], new

    idx_old = state.seasonal[pos]
    if idx_old < EPS_FLOOR:
        raise DivisionDegenerate(f"seasonal index at position {pos} underflowed")
    level_new = state.epsilon * (measured / idx_old) + (1.0 - state.epsilon) * (
        state.level + state.trend
    )
    trend_new = state.gamma * (level_new - state.level) + (1.0 - state.gamma) * state.trend
    if level_new < EPS_FLOOR:
        raise DivisionDegenerate("level underflowed before seasonal update")
    idx_new = state.beta * (measured / level_new) + (1.0 - state.beta) * idx_old
    seasonal = list(state.seasonal)
    seasonal[pos] = idx_new
    new = replace(
        state,
        level=level_new,
        trend=trend_new,
        seasonal=tuple(seasonal),
        position=next_pos,
    )
    return (level_new + trend_new) * seasonal[next_pos], new


def predict_horizon(state: EwmaState | HwState, h: int) -> list[float]:
    """Forecast the next ``h`` slots without mutating state.

    The EWMA has no trend or season, so it repeats its single prediction;
    the seasonal model extrapolates ``(level + k*trend) * index(position+k)``.
    """
    if h < 1:
        raise ValueError("horizon must be >= 1")
    if isinstance(state, EwmaState):
        return [state.prediction] * h
    l = state.period
    return [
        (state.level + k * state.trend) * state.seasonal[(state.position + k - 1) % l]
        for k in range(1, h + 1)
    ]


@dataclass(frozen=True)
class FitResult:
    """Winning parameters of a grid search and the mean squared error achieved."""

    parameters: tuple[float, ...]
    lmse: float


def ewma_lmse(series: list[float], epsilon: float) -> float:
    """Mean squared one-step-ahead error of the EWMA over a series."""
    if len(series) < 2:
        raise EmptyInput("need at least two samples to score one-step errors")
    state = ewma_init(series[0], epsilon)
    total = 0.0
    pred = state.prediction
    for y in series[1:]:
        err = pred - y
        total += err * err
        pred = epsilon * y + (1.0 - epsilon) * pred
    return total / (len(series) - 1)


def hw_lmse(series: list[float], period: int, epsilon: float, beta: float, gamma: float) -> float:
    """Mean squared one-step error after a two-period warm start.

    Returns ``inf`` when the parameter combination degenerates on this
    series, so grid searches can skip it.
    """
    if len(series) < 2 * period + 1:
        raise EmptyInput(
            f"need more than {2 * period} samples for period {period}"
        )
    try:
        state = hw_init(series[: 2 * period], period, epsilon, beta, gamma)
        pred = predict_horizon(state, 1)[0]
        total = 0.0
        n = 0
        for y in series[2 * period :]:
            err = pred - y
            total += err * err
            n += 1
            pred, state = hw_step(state, y)
    except DivisionDegenerate:
        return math.inf
    return total / n


def default_grid(model: str, step: float = 0.05) -> list[tuple[float, ...]]:
    """Uniform parameter grid over (0,1): 1-tuples for 'ewma', 3-tuples for 'hw'."""
    values = []
    v = step
    while v < 1.0 - 1e-12:
        values.append(round(v, 10))
        v += step
    if model == "ewma":
        return [(e,) for e in values]
    if model == "hw":
        return [tuple(p) for p in itertools.product(values, repeat=3)]
    raise ValueError(f"unknown model {model!r}")


def fit_lmse(
    model: str,
    series: list[float] | tuple[float, ...],
    grid: list[tuple[float, ...]] | None = None,
    *,
    period: int | None = None,
) -> FitResult:
    """Exhaustive grid search minimizing one-step-ahead mean squared error.

    Ties are broken toward the lexicographically smallest parameter tuple.
    For ``model='hw'`` the grid tuples are (epsilon, beta, gamma) and
    ``period`` is required.
    """
    if not series:
        raise EmptyInput("empty series")
    if grid is None:
        grid = default_grid(model)
    grid = sorted(tuple(float(p) for p in g) for g in grid)
    if not grid:
        raise EmptyInput("empty parameter grid")

    series = list(series)
    best: tuple[float, ...] | None = None
    best_err = math.inf
    for params in grid:
        if model == "ewma":
            if len(params) != 1:
                raise ValueError("ewma grid entries must be 1-tuples")
            err = ewma_lmse(series, params[0])
        elif model == "hw":
            if period is None:
                raise ValueError("period is required for the seasonal model")
            if len(params) != 3:
                raise ValueError("hw grid entries must be (epsilon, beta, gamma)")
            err = hw_lmse(series, period, *params)
        else:
            raise ValueError(f"unknown model {model!r}")
        if err < best_err:
            best, best_err = params, err
    if best is None or math.isinf(best_err):
        raise DivisionDegenerate("every grid point degenerated on this series")
    return FitResult(parameters=best, lmse=best_err)
