"""
Residual diagnostics and iterative order selection.

Residuals are per-window differences between observed and expected claim
counts. White-noise checks: sample ACF, Ljung-Box, the cumulative
periodogram (Bartlett B) test and a Wald-Wolfowitz runs test. Order
selection starts at two regimes (given evidence of regimes at order one) and
adds a regime until the Bartlett test no longer rejects.
"""

import logging
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from scipy import stats
from statsmodels.stats.diagnostic import acorr_ljungbox
from statsmodels.tsa.stattools import acf as _sample_acf

from calibrate import fit
from config import DIAGNOSTICS_CONFIG
from decode import check_grid, expected_counts, observed_counts
from exceptions import (
    DegenerateSigns, InputError, LengthMismatch, NonFinite, NonPositiveExpected, SeriesTooShort, ZeroVariance,
)
from models import (
    EventSequence, ExposureStepFunction, FitResult, ModelParams, OrderSelectionResult, RecursionState,
    ResidualSeries, TestReport, WindowGrid,
)
from run_metadata import record_order_step, record_test, record_warning

logger = logging.getLogger(__name__)

BARTLETT_MIN_LENGTH = 16


def _series(values, name: str = 'series') -> np.ndarray:
    x = np.asarray(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{name} contains non-finite values")
    return x


def _p(value: float) -> float:
    return float(np.clip(value, 0.0, 1.0))


def acf(series, max_lag: int) -> np.ndarray:
    """Sample autocorrelations at lags 1..max_lag (biased denominator)."""
    x = _series(series)
    if x.size <= max_lag:
        raise SeriesTooShort(f"series of length {x.size} is too short for lag {max_lag}")
    if np.ptp(x) == 0:
        raise ZeroVariance("series is constant")
    return _sample_acf(x, nlags=max_lag, adjusted=False, fft=True)[1:]


def ljung_box(series, lag: int) -> TestReport:
    x = _series(series)
    if lag < 1:
        raise InputError(f"lag must be positive, got {lag}")
    if x.size <= lag:
        raise SeriesTooShort(f"series of length {x.size} is too short for Ljung-Box lag {lag}")
    if np.ptp(x) == 0:
        raise ZeroVariance("series is constant")
    table = acorr_ljungbox(x, lags=[lag])
    return TestReport(name='ljung_box', statistic=float(table['lb_stat'].iloc[0]),
                      p_value=_p(table['lb_pvalue'].iloc[0]), parameters={'lag': lag, 'n': int(x.size)})


def bartlett_b(series) -> TestReport:
    """Cumulative periodogram test for white noise.

    B = sqrt(m) * max_j |C_j - j/m| over Fourier frequencies j = 1..m with
    m = floor((n - 1) / 2); the p-value is the Kolmogorov limiting tail.
    """
    x = _series(series)
    n = x.size
    if n < BARTLETT_MIN_LENGTH:
        raise SeriesTooShort(f"Bartlett B needs at least {BARTLETT_MIN_LENGTH} values, got {n}")
    m = (n - 1) // 2
    periodogram = np.abs(np.fft.rfft(x - x.mean())[1:m + 1]) ** 2 / n
    total = periodogram.sum()
    if total <= 0:
        raise ZeroVariance("series has no spectral mass")
    cumulative = np.cumsum(periodogram) / total
    b = float(np.sqrt(m) * np.max(np.abs(cumulative - np.arange(1, m + 1) / m)))
    return TestReport(name='bartlett_b', statistic=b, p_value=_p(stats.kstwobign.sf(b)),
                      parameters={'frequencies': int(m), 'n': int(n)})


def runs_test(series, center: Optional[Literal['zero', 'median']] = None) -> TestReport:
    """Wald-Wolfowitz runs test on signs about zero (or the median).

    Values equal to the center are dropped. Two-sided normal approximation.
    """
    center = center or DIAGNOSTICS_CONFIG['runs_center']
    x = _series(series)
    if center == 'median':
        x = x - np.median(x)
    elif center != 'zero':
        raise InputError(f"unknown runs-test center {center!r}")
    signs = np.sign(x[x != 0])
    n1 = int(np.count_nonzero(signs > 0))
    n2 = int(np.count_nonzero(signs < 0))
    if n1 == 0 or n2 == 0:
        raise DegenerateSigns(f"runs test needs values on both sides of the center ({n1} above, {n2} below)")

    n = n1 + n2
    runs = 1 + int(np.count_nonzero(signs[1:] != signs[:-1]))
    mean = 2.0 * n1 * n2 / n + 1.0
    variance = 2.0 * n1 * n2 * (2.0 * n1 * n2 - n) / (n ** 2 * (n - 1))
    if variance <= 0:
        raise DegenerateSigns("runs count has zero variance")
    z = (runs - mean) / np.sqrt(variance)
    return TestReport(name='runs_test', statistic=float(z), p_value=_p(2 * stats.norm.sf(abs(z))),
                      parameters={'runs': runs, 'above': n1, 'below': n2, 'center': center})


def dispersion(observed, expected, dof: int = 0) -> float:
    """Pearson dispersion sum((obs - exp)^2 / exp) / (n - dof)."""
    obs = _series(observed, 'observed')
    exp = _series(expected, 'expected')
    if obs.shape != exp.shape:
        raise LengthMismatch(f"observed ({obs.size}) and expected ({exp.size}) lengths differ")
    if np.any(exp <= 0):
        raise NonPositiveExpected("expected counts must be positive")
    if obs.size - dof <= 0:
        raise SeriesTooShort(f"{obs.size} windows leave no degrees of freedom after {dof} parameters")
    return float(np.sum((obs - exp) ** 2 / exp) / (obs.size - dof))


def free_parameters(order: int) -> int:
    """r(r-1) transition rates plus r intensities; pi is not estimated."""
    return order * order


def information_criteria(loglik: float, order: int, n_obs: int) -> Dict[str, float]:
    if order < 1:
        raise InputError(f"order must be at least 1, got {order}")
    if n_obs < 1:
        raise InputError(f"number of observations must be positive, got {n_obs}")
    p = free_parameters(order)
    return {
        'aic': -2.0 * loglik + 2.0 * p,
        'bic': -2.0 * loglik + p * np.log(n_obs),
        'n_params': p,
    }


def residual_summary(residuals) -> Dict[str, float]:
    e = _series(residuals, 'residuals')
    if e.size == 0:
        raise SeriesTooShort("no residuals to summarize")
    return {'sum': float(e.sum()), 'sumAbs': float(np.abs(e).sum()), 'sumSq': float(np.sum(e ** 2))}


def residual_series(observed, expected, grid: WindowGrid) -> ResidualSeries:
    obs = _series(observed, 'observed')
    exp = _series(expected, 'expected')
    if obs.shape != exp.shape or obs.size != grid.size:
        raise LengthMismatch(f"{obs.size} observed, {exp.size} expected for {grid.size} windows")
    return ResidualSeries(grid=grid, observed=obs, expected=exp, residuals=obs - exp)


def model_residuals(params: ModelParams, recursion: RecursionState, gamma: ExposureStepFunction,
                    grid: WindowGrid, method: str = 'interpolate') -> ResidualSeries:
    """Observed minus expected claims per window for a fitted model."""
    expected = expected_counts(params, recursion, gamma, grid, method=method)
    observed = observed_counts(recursion.times[recursion.flags == 1], grid)
    return residual_series(observed, expected, grid)


def evidence_of_regimes(observed, expected, dof: int = 1, threshold: Optional[float] = None,
                        alpha: Optional[float] = None, center: Optional[str] = None) -> Dict[str, Any]:
    """Overdispersion or clustering of residual signs under a single-regime fit."""
    threshold = DIAGNOSTICS_CONFIG['dispersion_threshold'] if threshold is None else threshold
    alpha = DIAGNOSTICS_CONFIG['runs_alpha'] if alpha is None else alpha

    phi = dispersion(observed, expected, dof=dof)
    residuals = np.asarray(observed, dtype=float) - np.asarray(expected, dtype=float)
    try:
        runs_p = runs_test(residuals, center=center).p_value
    except DegenerateSigns as e:
        logger.warning(f"Runs test skipped in evidence check: {e}")
        runs_p = None

    evident = phi > threshold or (runs_p is not None and runs_p < alpha)
    return {
        'dispersion': phi,
        'dispersion_threshold': threshold,
        'runs_p_value': runs_p,
        'runs_alpha': alpha,
        'evident': bool(evident),
    }


def diagnostic_report(params: ModelParams, recursion: RecursionState, gamma: ExposureStepFunction,
                      grid: WindowGrid, lags: Optional[List[int]] = None, loglik: Optional[float] = None,
                      center: Optional[str] = None) -> Tuple[Dict[str, Any], ResidualSeries]:
    """All residual statistics for one fitted model, plus the residual series."""
    lags = lags or DIAGNOSTICS_CONFIG['ljung_box_lags']
    residuals = model_residuals(params, recursion, gamma, grid)
    e = residuals.residuals
    order = params.order
    loglik = float(np.sum(np.log(recursion.c))) if loglik is None else loglik

    tests: Dict[str, Any] = {}
    for lag in lags:
        try:
            tests[f'ljung_box_{lag}'] = ljung_box(e, lag)
        except (SeriesTooShort, ZeroVariance) as exc:
            logger.warning(f"Ljung-Box at lag {lag} skipped: {exc}")
            record_warning('diagnostics', f"Ljung-Box lag {lag} skipped: {exc}")
            tests[f'ljung_box_{lag}'] = None
    for name, run in (('runs_test', lambda: runs_test(e, center=center)), ('bartlett_b', lambda: bartlett_b(e))):
        try:
            tests[name] = run()
        except (DegenerateSigns, SeriesTooShort, ZeroVariance) as exc:
            logger.warning(f"{name} skipped: {exc}")
            record_warning('diagnostics', f"{name} skipped: {exc}")
            tests[name] = None

    for report in tests.values():
        if report is not None:
            record_test(report.name, report.statistic, report.p_value, report.parameters)

    try:
        phi = dispersion(residuals.observed, residuals.expected, dof=free_parameters(order))
    except (SeriesTooShort, NonPositiveExpected) as exc:
        logger.warning(f"Dispersion skipped: {exc}")
        record_warning('diagnostics', f"dispersion skipped: {exc}")
        phi = None

    n_claims = int(np.count_nonzero(recursion.flags == 1))
    return {
        'order': order,
        'windows': grid.size,
        'residuals': residual_summary(e),
        'dispersion': phi,
        'tests': {k: (v.model_dump() if v is not None else None) for k, v in tests.items()},
        'criteria': information_criteria(loglik, order, max(n_claims, 1)),
        'loglik': loglik,
    }, residuals


def select_order(events: EventSequence, gamma: ExposureStepFunction, grid: WindowGrid,
                 alpha: Optional[float] = None, max_order: Optional[int] = None,
                 start_order: Optional[int] = None, evidence_check: bool = True,
                 threads: Optional[int] = None, **fit_options) -> OrderSelectionResult:
    """Fit increasing orders until the Bartlett test stops rejecting white noise."""
    alpha = DIAGNOSTICS_CONFIG['alpha'] if alpha is None else alpha
    max_order = DIAGNOSTICS_CONFIG['max_order'] if max_order is None else max_order
    start_order = DIAGNOSTICS_CONFIG['start_order'] if start_order is None else start_order
    if start_order < 1 or max_order < start_order:
        raise InputError(f"need 1 <= start_order <= max_order, got {start_order} and {max_order}")
    check_grid(grid, gamma.horizon)

    fits: Dict[int, FitResult] = {}
    reports: Dict[int, TestReport] = {}
    criteria: Dict[int, Dict[str, float]] = {}
    n_obs = max(events.n_claims, 1)

    def _evaluate(order: int) -> TestReport:
        result = fit(events, gamma, order, threads=threads, **fit_options)
        residuals = model_residuals(result.params, result.recursion, gamma, grid)
        report = bartlett_b(residuals.residuals)
        fits[order] = result
        reports[order] = report
        criteria[order] = information_criteria(result.loglik[-1], order, n_obs)
        return report

    evidence = None
    if evidence_check and start_order > 1:
        baseline = fit(events, gamma, 1, threads=threads, **fit_options)
        baseline_residuals = model_residuals(baseline.params, baseline.recursion, gamma, grid)
        evidence = evidence_of_regimes(baseline_residuals.observed, baseline_residuals.expected)
        fits[1] = baseline
        criteria[1] = information_criteria(baseline.loglik[-1], 1, n_obs)
        if not evidence['evident']:
            logger.info(f"No evidence of regimes (dispersion {evidence['dispersion']:.3f}); keeping order 1")
            reports[1] = bartlett_b(baseline_residuals.residuals)
            record_order_step(1, reports[1].p_value, True)
            return OrderSelectionResult(chosen_order=1, orders_tried=[1], fits=fits, reports=reports,
                                        criteria=criteria, evidence=evidence, converged=True)

    tried = []
    for order in range(start_order, max_order + 1):
        report = _evaluate(order)
        tried.append(order)
        accepted = report.p_value >= alpha
        record_order_step(order, report.p_value, accepted)
        logger.info(f"Order {order}: Bartlett B = {report.statistic:.4f}, p = {report.p_value:.4g}")
        if accepted:
            return OrderSelectionResult(chosen_order=order, orders_tried=tried, fits=fits, reports=reports,
                                        criteria=criteria, evidence=evidence, converged=True)

    message = f"residuals still reject white noise at max_order={max_order}"
    logger.warning(message)
    record_warning('select_order', message)
    return OrderSelectionResult(chosen_order=max_order, orders_tried=tried, fits=fits, reports=reports,
                                criteria=criteria, evidence=evidence, converged=False)
