"""
Domain validation, exposure-function algebra and construction of the merged
event sequence consumed by calibration.

Exposure functions are right-continuous step functions; operational time is
rho(t) = integral of gamma over [0, t].
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np

from config import VALIDATION_RULES
from exceptions import (
    BadProbabilityVector, DimensionMismatch, InvalidExposure, NegativeOffDiagonal,
    NonFinite, NonPositiveIntensity, OutOfHorizon, RowSumViolation, UnsortedInput,
)
from models import EventSequence, ExposureStepFunction, ModelParams

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]

FLAG_EXPOSURE_CHANGE = 0
FLAG_CLAIM = 1


def validate_params(Q, lam, pi, order: Optional[int] = None, rules: dict = None) -> ModelParams:
    """Check generator, intensities and initial distribution; return ModelParams.

    Rows of Q (and pi) whose sums deviate by less than the normalization
    tolerance are repaired; larger deviations are rejected.
    """
    rules = rules or VALIDATION_RULES
    Q = np.array(Q, dtype=float, ndmin=2)
    lam = np.array(lam, dtype=float, ndmin=1)
    pi = np.array(pi, dtype=float, ndmin=1)

    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] < 1:
        raise DimensionMismatch(f"Q must be square, got shape {Q.shape}")
    r = Q.shape[0]
    if lam.shape != (r,) or pi.shape != (r,):
        raise DimensionMismatch(f"lambda and pi must have length {r}, got {lam.shape} and {pi.shape}")
    if order is not None and order != r:
        raise DimensionMismatch(f"order {order} does not match Q dimension {r}")
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(pi))):
        raise NonFinite("model parameters contain non-finite values")

    off = ~np.eye(r, dtype=bool)
    if np.any(Q[off] < 0):
        i, j = np.argwhere((Q < 0) & off)[0]
        raise NegativeOffDiagonal(f"q[{i + 1},{j + 1}] = {Q[i, j]} is negative")
    if np.any(np.diag(Q) > 0):
        i = int(np.argmax(np.diag(Q) > 0))
        raise RowSumViolation(f"diagonal q[{i + 1},{i + 1}] = {Q[i, i]} is positive")

    row_sums = Q.sum(axis=1)
    worst = float(np.max(np.abs(row_sums)))
    if worst > rules['row_sum_normalize_tol']:
        i = int(np.argmax(np.abs(row_sums)))
        raise RowSumViolation(f"row {i + 1} of Q sums to {row_sums[i]:.3e}")
    if worst > rules['row_sum_tol']:
        logger.debug(f"Normalizing generator rows (max deviation {worst:.3e})")
        Q = Q.copy()
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))

    if np.any(lam <= 0):
        i = int(np.argmax(lam <= 0))
        raise NonPositiveIntensity(f"lambda[{i + 1}] = {lam[i]} must be positive")

    if np.any(pi < 0):
        raise BadProbabilityVector(f"pi has negative entries: {pi.tolist()}")
    deviation = abs(pi.sum() - 1.0)
    if deviation > rules['row_sum_normalize_tol']:
        raise BadProbabilityVector(f"pi sums to {pi.sum():.12g}, not 1")
    if deviation > rules['probability_tol']:
        pi = pi / pi.sum()

    return ModelParams(order=r, Q=Q, lam=lam, pi=pi)


def validate_exposure(breakpoints, values, horizon: float, truncate: bool = False) -> ExposureStepFunction:
    """Build an exposure step function covering [0, horizon].

    With truncate=True, pieces starting at or beyond the horizon are dropped
    instead of rejected.
    """
    breakpoints = np.array(breakpoints, dtype=float, ndmin=1)
    values = np.array(values, dtype=float, ndmin=1)
    horizon = float(horizon)

    if breakpoints.shape != values.shape or breakpoints.size == 0:
        raise DimensionMismatch("exposure needs one value per breakpoint")
    if not (np.all(np.isfinite(breakpoints)) and np.all(np.isfinite(values)) and np.isfinite(horizon)):
        raise NonFinite("exposure contains non-finite values")
    if horizon <= 0:
        raise InvalidExposure(f"horizon must be positive, got {horizon}")
    if breakpoints[0] != 0.0:
        raise InvalidExposure(f"first exposure piece must start at 0, got {breakpoints[0]}")
    if np.any(np.diff(breakpoints) <= 0):
        raise UnsortedInput("exposure breakpoints must be strictly increasing")
    if np.any(values <= 0):
        raise InvalidExposure("exposure values must be strictly positive")

    beyond = breakpoints >= horizon
    if np.any(beyond):
        if not truncate:
            raise OutOfHorizon(f"exposure breakpoint {breakpoints[beyond][0]} is not before horizon {horizon}")
        breakpoints, values = breakpoints[~beyond], values[~beyond]

    return ExposureStepFunction(breakpoints=breakpoints, values=values, horizon=horizon)


def constant_exposure(horizon: float, value: float = 1.0) -> ExposureStepFunction:
    return validate_exposure([0.0], [value], horizon)


def _check_horizon(gamma: ExposureStepFunction, t: np.ndarray, upper: float, what: str):
    if np.any(t < 0) or np.any(t > upper) or np.any(np.isnan(t)):
        bad = t[(t < 0) | (t > upper) | np.isnan(t)][0]
        raise OutOfHorizon(f"{what} {bad} outside [0, {upper}]")


def _piece_index(gamma: ExposureStepFunction, t: np.ndarray) -> np.ndarray:
    return np.searchsorted(gamma.breakpoints, t, side='right') - 1


def exposure_at(gamma: ExposureStepFunction, t: ArrayLike):
    """Right-continuous evaluation of gamma."""
    t_arr = np.asarray(t, dtype=float)
    _check_horizon(gamma, t_arr, gamma.horizon, "time")
    value = gamma.values[_piece_index(gamma, t_arr)]
    return float(value) if value.ndim == 0 else value


def operational_time(gamma: ExposureStepFunction, t: ArrayLike):
    t_arr = np.asarray(t, dtype=float)
    _check_horizon(gamma, t_arr, gamma.horizon, "time")
    idx = _piece_index(gamma, t_arr)
    rho = gamma.cumulative[idx] + gamma.values[idx] * (t_arr - gamma.breakpoints[idx])
    return float(rho) if rho.ndim == 0 else rho


def inverse_operational_time(gamma: ExposureStepFunction, s: ArrayLike):
    s_arr = np.asarray(s, dtype=float)
    _check_horizon(gamma, s_arr, gamma.total_operational_time, "operational time")
    starts = gamma.cumulative[:-1]
    idx = np.searchsorted(starts, s_arr, side='right') - 1
    t = gamma.breakpoints[idx] + (s_arr - starts[idx]) / gamma.values[idx]
    t = np.clip(t, 0.0, gamma.horizon)
    return float(t) if t.ndim == 0 else t


def build_event_sequence(claim_times, gamma: ExposureStepFunction) -> EventSequence:
    """Merge claims (flag 1) with interior exposure breakpoints (flag 0).

    At equal times the breakpoint precedes the claim, so the claim's jump
    factor uses the exposure in force at the claim instant.
    """
    claims = np.array(claim_times, dtype=float, ndmin=1)
    if claims.size:
        if not np.all(np.isfinite(claims)):
            raise NonFinite("claim times must be finite")
        gaps = np.diff(claims)
        if np.any(gaps < 0):
            raise UnsortedInput(f"claim times are not sorted (first at index {int(np.argmax(gaps < 0)) + 1})")
        if np.any(gaps == 0):
            raise UnsortedInput(f"duplicate claim time {claims[1:][gaps == 0][0]}")
        _check_horizon(gamma, claims, gamma.horizon, "claim time")

    breaks = gamma.interior_breakpoints
    times = np.concatenate([breaks, claims])
    flags = np.concatenate([np.full(breaks.size, FLAG_EXPOSURE_CHANGE), np.full(claims.size, FLAG_CLAIM)])
    order = np.lexsort((flags, times))
    times, flags = times[order], flags[order]

    gamma_after = np.asarray(exposure_at(gamma, times), dtype=float).reshape(-1)
    gamma_before = np.concatenate([[gamma.values[0]], gamma_after[:-1]])[:times.size]

    return EventSequence(times=times, flags=flags, gamma_before=gamma_before, gamma_after=gamma_after,
                         gamma_initial=float(gamma.values[0]), horizon=gamma.horizon)


def window_edges(horizon: float, width: float, merge_short_tail: bool = False) -> np.ndarray:
    """Edges 0, w, 2w, ..., T; a final partial window is kept as is unless
    merge_short_tail folds one shorter than w/2 into its neighbour."""
    if width <= 0:
        raise InvalidExposure(f"window width must be positive, got {width}")
    edges = np.arange(0.0, horizon, width)
    edges = edges[(horizon - edges > 1e-9 * width) | (edges == 0.0)]
    if merge_short_tail and edges.size > 1 and horizon - edges[-1] < width / 2:
        edges = edges[:-1]
    return np.append(edges, float(horizon))


def exposure_from_series(times, values, resolution: float, horizon: float) -> ExposureStepFunction:
    """Approximate a densely sampled exposure series by a step function.

    Each step of width `resolution` takes the mean of the samples falling in
    it (or the most recent earlier sample when empty); equal adjacent steps
    are merged.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape or times.size == 0:
        raise DimensionMismatch("exposure series needs matching, non-empty times and values")
    if np.any(np.diff(times) < 0):
        raise UnsortedInput("exposure series times must be sorted")
    if resolution <= 0:
        raise InvalidExposure("resolution must be positive")

    edges = np.arange(0.0, horizon, resolution)
    bins = np.searchsorted(edges, times, side='right') - 1
    inside = (bins >= 0) & (times <= horizon)
    sums = np.bincount(bins[inside], weights=values[inside], minlength=edges.size)
    counts = np.bincount(bins[inside], minlength=edges.size)

    steps = np.empty(edges.size)
    last = values[0]
    for k in range(edges.size):
        if counts[k]:
            last = sums[k] / counts[k]
        steps[k] = last

    keep = np.concatenate([[True], steps[1:] != steps[:-1]])
    return validate_exposure(edges[keep], steps[keep], horizon)
