"""
Regime inference from a fitted model.

State probabilities are attached to the merged entries of a RecursionState
(claims, exposure changes and the closing horizon entry). Expected claim
counts per window feed the residual diagnostics.
"""

import logging
from typing import Literal

import numpy as np

from calibrate import e_step, forward_backward
from core import FLAG_CLAIM, build_event_sequence, exposure_at, operational_time, validate_exposure, window_edges
from exceptions import GridOutsideHorizon, InputError, UnsortedInput
from models import ExposureStepFunction, ModelParams, RecursionState, StateProbabilitySeries, WindowGrid

logger = logging.getLogger(__name__)

CLIP_TOLERANCE = 1e-12


def _normalized(probs: np.ndarray) -> np.ndarray:
    if np.any(probs < -CLIP_TOLERANCE):
        logger.warning(f"State probabilities below -{CLIP_TOLERANCE:g} (min {probs.min():.3e}) were clipped")
    probs = np.maximum(probs, 0.0)
    return probs / probs.sum(axis=1, keepdims=True)


def smoothed_probs(recursion: RecursionState) -> StateProbabilitySeries:
    """P[M(t_k) = i | all data], proportional to L(k) * R(k+1)."""
    m = recursion.m
    probs = recursion.L[1:m + 1] * recursion.R[2:m + 2]
    return StateProbabilitySeries(times=recursion.times, flags=recursion.flags, probs=_normalized(probs),
                                  kind='smoothed')


def filtered_probs(recursion: RecursionState) -> StateProbabilitySeries:
    """P[M(t_k) = i | data up to t_k], the forward vectors L(k)."""
    m = recursion.m
    return StateProbabilitySeries(times=recursion.times, flags=recursion.flags,
                                  probs=_normalized(recursion.L[1:m + 1].copy()), kind='filtered')


def most_likely_regimes(series: StateProbabilitySeries) -> np.ndarray:
    """Per-entry argmax state (1-based); ties go to the lower state index."""
    return np.argmax(series.probs, axis=1) + 1


def make_grid(horizon: float, width: float) -> WindowGrid:
    """Windows of equal width covering [0, horizon]; the last may be shorter."""
    return WindowGrid(boundaries=window_edges(horizon, width))


def check_grid(grid: WindowGrid, horizon: float):
    b = grid.boundaries
    if b.size < 2:
        raise GridOutsideHorizon("grid needs at least two boundaries")
    if np.any(np.diff(b) <= 0):
        raise UnsortedInput("grid boundaries must be strictly increasing")
    if b[0] < 0 or b[-1] > horizon:
        raise GridOutsideHorizon(f"grid [{b[0]}, {b[-1]}] extends outside [0, {horizon}]")


def observed_counts(claim_times, grid: WindowGrid) -> np.ndarray:
    """Claims per window; windows are [start, end), the last one closed."""
    return np.histogram(np.asarray(claim_times, dtype=float), bins=grid.boundaries)[0].astype(float)


def _interpolated_counts(params: ModelParams, recursion: RecursionState, gamma: ExposureStepFunction,
                         grid: WindowGrid) -> np.ndarray:
    # p(s) is right-continuous: p_k on [t_k, t_{k+1}), p_1 before the first entry
    probs = smoothed_probs(recursion).probs
    knots = np.concatenate([[0.0], recursion.times])
    values = np.vstack([probs[:1], probs[:-1]])
    cumulative = np.vstack([np.zeros(params.order), np.cumsum(values * np.diff(knots)[:, None], axis=0)])

    b = grid.boundaries
    at_edges = np.column_stack([np.interp(b, knots, cumulative[:, i]) for i in range(params.order)])
    widths = np.diff(b)
    averages = np.diff(at_edges, axis=0) / widths[:, None]
    exposure = np.diff(operational_time(gamma, b))
    return (averages @ params.lam) * exposure


def _exact_counts(params: ModelParams, recursion: RecursionState, gamma: ExposureStepFunction,
                  grid: WindowGrid) -> np.ndarray:
    # Window edges enter as redundant exposure changes, so every step lies
    # inside one window and its occupancy integral is exact.
    inner = grid.boundaries[(grid.boundaries > 0) & (grid.boundaries < gamma.horizon)]
    breakpoints = np.union1d(gamma.breakpoints, inner)
    refined = validate_exposure(breakpoints, exposure_at(gamma, breakpoints), gamma.horizon)

    claims = recursion.times[recursion.flags == FLAG_CLAIM]
    events = build_event_sequence(claims, refined)
    fine = forward_backward(params, events)
    occupancy = e_step(params, events, fine).occupancy
    contribution = (occupancy * fine.gamma_interval[:, None]) @ params.lam

    window = np.searchsorted(grid.boundaries, fine.times, side='left') - 1
    inside = (window >= 0) & (window < grid.size)
    return np.bincount(window[inside], weights=contribution[inside], minlength=grid.size)


def expected_counts(params: ModelParams, recursion: RecursionState, gamma: ExposureStepFunction,
                    grid: WindowGrid, method: Literal['interpolate', 'exact'] = 'interpolate') -> np.ndarray:
    """Expected claims per window under the smoothed regime posterior.

    'interpolate' averages the per-entry smoothed vectors over each window
    (held constant between entries) and multiplies by lambda and the
    window's operational time. 'exact' integrates the posterior occupancy
    against lambda * gamma.
    """
    check_grid(grid, gamma.horizon)
    if params.order != recursion.order:
        raise InputError(f"model order {params.order} does not match recursion order {recursion.order}")
    if method == 'interpolate':
        return _interpolated_counts(params, recursion, gamma, grid)
    if method == 'exact':
        return _exact_counts(params, recursion, gamma, grid)
    raise InputError(f"unknown expected-count method {method!r}")
