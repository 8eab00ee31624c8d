"""
EM calibration of Markov-modulated non-homogeneous Poisson processes.

One iteration: scaled forward/backward recursions over the merged
claim/exposure-change sequence, closed-form E-step estimators from Van Loan
integrals, then the M-step

    q_ij = a_ij / T_i,    lambda_i = n_i / T*_i.

The observation window is closed by a survival step from the last merged
entry to the horizon, so the log-likelihood includes the no-event stretch
at the end and the expected times add up to T and rho(T).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Any, Optional

import numpy as np

from config import FIT_CONFIG, RUNTIME_CONFIG
from core import FLAG_CLAIM, operational_time, validate_params, window_edges
from exceptions import (
    EmptyState, InputError, NonFinite, NonIdentifiable, OrderMismatch, UnderflowCollapse, UnsortedInput,
)
from matexp import expm_batch, van_loan_batch
from models import (
    EStepEstimators, EventSequence, ExposureStepFunction, FitResult, ModelParams, RecursionState,
    TransitionKernels,
)
from run_metadata import record_fit, record_inputs, record_iteration, record_warning

logger = logging.getLogger(__name__)


def interval_kernels(params: ModelParams, gamma_before, gamma_at_event, dt, delta) -> TransitionKernels:
    """Survival kernel exp[(Q - Lambda gamma) dt] and the per-entry kernel.

    Claims (delta=1) take fbar * Lambda * gamma_at_event; exposure changes
    (delta=0) take fbar alone. Scalar arguments give (r, r) kernels, arrays
    give (m, r, r) stacks.
    """
    scalar = all(np.ndim(x) == 0 for x in (gamma_before, gamma_at_event, dt, delta))
    gb, ga, dt, delta = np.broadcast_arrays(*(np.atleast_1d(np.asarray(x, dtype=float))
                                              for x in (gamma_before, gamma_at_event, dt, delta)))
    if np.any(dt < 0):
        raise InputError("interval lengths must be nonnegative")

    generators = params.Q[None, :, :] - gb[:, None, None] * np.diag(params.lam)[None, :, :]
    fbar = expm_batch(generators * dt[:, None, None])
    jump = fbar * (params.lam[None, None, :] * ga[:, None, None])
    fdelta = np.where((delta == FLAG_CLAIM)[:, None, None], jump, fbar)
    if not (np.all(np.isfinite(fbar)) and np.all(np.isfinite(fdelta))):
        raise NonFinite("transition kernels are not finite")

    if scalar:
        return TransitionKernels(fbar=fbar[0], fdelta=fdelta[0])
    return TransitionKernels(fbar=fbar, fdelta=fdelta)


def _steps(events: EventSequence):
    """Merged entries plus the closing survival step to the horizon."""
    times = np.append(events.times, events.horizon)
    flags = np.append(events.flags, 0).astype(np.int8)
    last_gamma = events.gamma_after[-1] if events.n else events.gamma_initial
    gamma_interval = np.append(events.gamma_before, last_gamma)
    gamma_event = np.append(events.gamma_after, last_gamma)
    dt = np.diff(np.concatenate([[0.0], times]))
    if np.any(dt < 0):
        k = int(np.argmax(dt < 0)) + 1
        raise UnsortedInput(f"entry {k} at time {times[k - 1]} precedes its predecessor or exceeds the horizon")
    return times, flags, dt, gamma_interval, gamma_event


def forward_backward(params: ModelParams, events: EventSequence, floor: Optional[float] = None) -> RecursionState:
    """Scaled recursions L(k), R(k) and normalizers c_k."""
    floor = FIT_CONFIG['underflow_floor'] if floor is None else floor
    times, flags, dt, gamma_interval, gamma_event = _steps(events)
    kernels = interval_kernels(params, gamma_interval, gamma_event, dt, flags)
    f = kernels.fdelta
    m, r = dt.size, params.order

    L = np.empty((m + 1, r))
    c = np.empty(m)
    L[0] = params.pi
    for k in range(1, m + 1):
        v = L[k - 1] @ f[k - 1]
        ck = v.sum()
        if not np.isfinite(ck) or ck < floor:
            raise UnderflowCollapse(f"normalizer c_{k} = {ck!r} collapsed at time {times[k - 1]}", k=k,
                                    value=float(ck))
        L[k] = v / ck
        c[k - 1] = ck

    R = np.empty((m + 2, r))
    R[m + 1] = 1.0
    for k in range(m, 0, -1):
        R[k] = f[k - 1] @ R[k + 1] / c[k - 1]
    R[0] = R[1]

    return RecursionState(times=times, flags=flags, dt=dt, gamma_interval=gamma_interval,
                          gamma_event=gamma_event, L=L, R=R, c=c, kernels=kernels)


def log_likelihood(recursion: RecursionState) -> float:
    return float(np.sum(np.log(recursion.c)))


def _interval_integrals(A, B, dt, threads: int, chunk_size: int) -> np.ndarray:
    """Van Loan integrals in ordered chunks; the stacked result does not
    depend on the number of workers."""
    m = dt.size
    slices = [slice(start, min(start + chunk_size, m)) for start in range(0, m, chunk_size)]
    if threads <= 1 or len(slices) <= 1:
        parts = [van_loan_batch(A[s], B[s], dt[s]) for s in slices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            parts = list(executor.map(lambda s: van_loan_batch(A[s], B[s], dt[s]), slices))
    return np.concatenate(parts) if parts else np.zeros_like(A)


def e_step(params: ModelParams, events: EventSequence, recursion: RecursionState,
           threads: Optional[int] = None, chunk_size: Optional[int] = None) -> EStepEstimators:
    """Expected transition counts, claims, calendar time and operational time per regime."""
    threads = threads or RUNTIME_CONFIG['threads']
    chunk_size = chunk_size or RUNTIME_CONFIG['chunk_size']
    m = recursion.m
    L, R, c = recursion.L, recursion.R, recursion.c
    claims = recursion.flags == FLAG_CLAIM

    A = params.Q[None, :, :] - recursion.gamma_interval[:, None, None] * np.diag(params.lam)[None, :, :]
    outer = R[2:m + 2, :, None] * L[0:m, None, :]
    jump = (params.lam[None, :] * recursion.gamma_event[:, None])[:, :, None]
    B = np.where(claims[:, None, None], jump * outer, outer)

    integrals = _interval_integrals(A, B, recursion.dt, threads, chunk_size)
    scaled = integrals / c[:, None, None]
    if not np.all(np.isfinite(scaled)):
        raise NonFinite("E-step integrals are not finite")

    occupancy = np.maximum(np.diagonal(scaled, axis1=1, axis2=2), 0.0)
    t_hat = occupancy.sum(axis=0)
    t_star_hat = (recursion.gamma_interval[:, None] * occupancy).sum(axis=0)

    total = scaled.sum(axis=0)
    a_hat = params.Q * np.maximum(total.T, 0.0)
    np.fill_diagonal(a_hat, 0.0)
    np.fill_diagonal(a_hat, -a_hat.sum(axis=1))

    n_hat = (L[1:m + 1][claims] * R[2:m + 2][claims]).sum(axis=0)

    return EStepEstimators(a_hat=a_hat, n_hat=n_hat, t_hat=t_hat, t_star_hat=t_star_hat, occupancy=occupancy)


def m_step(est: EStepEstimators, params: ModelParams, starved_fraction: Optional[float] = None) -> ModelParams:
    """Closed-form maximizers; pi is held at its current value.

    A state whose expected time falls below starved_fraction * T keeps its
    current generator row and intensity for this iteration.
    """
    starved_fraction = FIT_CONFIG['starved_state_fraction'] if starved_fraction is None else starved_fraction
    floor = starved_fraction * float(np.sum(est.t_hat))
    r = params.order

    Q = params.Q.copy()
    lam = params.lam.copy()
    starved = []
    for i in range(r):
        rate = est.n_hat[i] / est.t_star_hat[i] if est.t_star_hat[i] > 0 else 0.0
        if est.t_hat[i] < floor or not rate > 0:
            starved.append(i)
            continue
        others = np.arange(r) != i
        Q[i, others] = est.a_hat[i, others] / est.t_hat[i]
        lam[i] = rate

    if len(starved) == r:
        raise EmptyState("every state is starved; no parameter can be updated")
    if starved:
        message = f"states {[i + 1 for i in starved]} starved (expected time below {floor:.3g}); held fixed"
        logger.warning(message)
        record_warning('m_step', message)

    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return validate_params(Q, lam, params.pi)


def initial_params(events: EventSequence, gamma: ExposureStepFunction, order: int,
                   window: Optional[float] = None, mixing_rate: Optional[float] = None) -> ModelParams:
    """Starting values: intensities from quantiles of exposure-scaled window rates.

    lambda_i is the (2i-1)/2r quantile of count / operational-time over
    windows (default width 1 time unit, at least 4r windows), nudged to be
    strictly increasing; generator rows mix uniformly at mixing_rate; pi is
    uniform.
    """
    n = events.n_claims
    if order < 1:
        raise InputError(f"order must be at least 1, got {order}")
    if n < order:
        raise NonIdentifiable(f"{n} claims cannot identify {order} regimes")

    total_rate = n / gamma.total_operational_time
    if order == 1:
        return validate_params([[0.0]], [total_rate], [1.0])

    window = FIT_CONFIG['init_window'] if window is None else window
    mixing_rate = FIT_CONFIG['init_mixing_rate'] if mixing_rate is None else mixing_rate
    if gamma.horizon / window < 4 * order:
        window = gamma.horizon / (4 * order)
    edges = window_edges(gamma.horizon, window, merge_short_tail=True)
    counts = np.histogram(events.claim_times, bins=edges)[0]
    exposure = np.diff(operational_time(gamma, edges))
    rates = counts / exposure

    levels = (2 * np.arange(1, order + 1) - 1) / (2 * order)
    lam = np.maximum(np.quantile(rates, levels), 0.1 * total_rate)
    for i in range(1, order):
        lam[i] = max(lam[i], lam[i - 1] * (1 + 1e-3))

    Q = np.full((order, order), mixing_rate / (order - 1))
    np.fill_diagonal(Q, -mixing_rate)
    return validate_params(Q, lam, np.full(order, 1.0 / order))


def _max_change(a: ModelParams, b: ModelParams) -> float:
    return float(max(np.max(np.abs(a.Q - b.Q)), np.max(np.abs(a.lam - b.lam))))


def fit(events: EventSequence, gamma: ExposureStepFunction, order: int, init: Optional[ModelParams] = None,
        tol_loglik: Optional[float] = None, max_iter: Optional[int] = None, stop_criterion: Optional[str] = None,
        tol_params: Optional[float] = None, threads: Optional[int] = None) -> FitResult:
    """Run EM until the log-likelihood (or parameter) change drops below tolerance."""
    tol_loglik = FIT_CONFIG['tol_loglik'] if tol_loglik is None else tol_loglik
    max_iter = FIT_CONFIG['max_iter'] if max_iter is None else max_iter
    stop_criterion = stop_criterion or FIT_CONFIG['stop_criterion']
    tol_params = FIT_CONFIG['tol_params'] if tol_params is None else tol_params
    slack = FIT_CONFIG['monotonicity_slack']

    if events.n_claims < order:
        raise NonIdentifiable(f"{events.n_claims} claims cannot identify {order} regimes")
    if init is not None and init.order != order:
        raise OrderMismatch(f"initial model has order {init.order}, requested {order}")
    params = init if init is not None else initial_params(events, gamma, order)
    record_inputs(events.n_claims, events.n - events.n_claims, events.horizon)

    trace = []
    iterations = 0
    converged = False
    params_settled = False
    while True:
        recursion = forward_backward(params, events)
        loglik = log_likelihood(recursion)
        trace.append(loglik)
        record_iteration(order, iterations, loglik)
        logger.debug(f"order {order} iteration {iterations}: loglik {loglik:.8f}")

        if len(trace) > 1:
            change = trace[-1] - trace[-2]
            if change < -slack:
                message = f"log-likelihood dropped by {-change:.3e} at iteration {iterations}"
                logger.warning(message)
                record_warning('fit', message)
            if stop_criterion == 'loglik' and abs(change) < tol_loglik:
                converged = True
        if params_settled:
            converged = True

        estimators = e_step(params, events, recursion, threads=threads)
        if converged or iterations >= max_iter:
            break

        updated = m_step(estimators, params)
        if stop_criterion == 'params' and _max_change(updated, params) < tol_params:
            params_settled = True
        params = updated
        iterations += 1

    if converged:
        logger.info(f"Order {order} EM converged after {iterations} iterations (loglik {trace[-1]:.6f})")
    else:
        logger.warning(f"Order {order} EM stopped at max_iter={max_iter} without converging")
    record_fit(order, iterations, converged, trace[-1])

    return FitResult(params=params, loglik=trace, iterations=iterations, converged=converged,
                     stop_reason='tolerance' if converged else 'max_iter',
                     recursion=recursion, estimators=estimators)


def fit_report(result: FitResult) -> Dict[str, Any]:
    """Fit-report document mirroring the E-step quantities of interest."""
    report = {
        'order': result.params.order,
        'loglik': [float(x) for x in result.loglik],
        'iterations': result.iterations,
        'converged': result.converged,
        'stopReason': result.stop_reason,
    }
    report.update(result.estimators.to_dict())
    return report
