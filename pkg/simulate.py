"""
Exact simulation of the latent regime chain and of exposure-modulated
arrivals.

Random streams: the root seed is expanded with numpy's SeedSequence; child 0
drives the regime path and child 1 drives arrivals, so changing the arrival
model never perturbs the simulated path.
"""

import logging
from typing import List, Optional, Union

import numpy as np

from config import SIMULATION_CONFIG
from core import inverse_operational_time, operational_time
from models import ExposureStepFunction, ModelParams, RegimePath, SimulationConfig, SimulationResult

logger = logging.getLogger(__name__)

PATH_STREAM = 0
ARRIVAL_STREAM = 1

RandomSource = Union[int, np.random.SeedSequence, np.random.Generator, None]


def derive_seeds(seed: int, count: int = 2) -> List[np.random.SeedSequence]:
    """Independent child seed sequences for the sub-streams of one run."""
    return np.random.SeedSequence(seed).spawn(count)


def _rng(source: RandomSource) -> np.random.Generator:
    if isinstance(source, np.random.Generator):
        return source
    return np.random.default_rng(source)


def stationary_distribution(Q) -> np.ndarray:
    """Solve nu Q = 0 with nu summing to one."""
    Q = np.asarray(Q, dtype=float)
    r = Q.shape[0]
    system = np.vstack([Q.T, np.ones(r)])
    rhs = np.zeros(r + 1)
    rhs[-1] = 1.0
    nu, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    return nu


def simulate_ctmc(params: ModelParams, horizon: float, seed: RandomSource = None) -> RegimePath:
    """Regime path on [0, horizon]: exponential holding times, embedded jump chain."""
    rng = _rng(seed)
    r = params.order
    exit_rates = params.exit_rates
    jump_probs = np.zeros((r, r))
    for i in range(r):
        if exit_rates[i] > 0:
            jump_probs[i] = np.where(np.arange(r) == i, 0.0, params.Q[i]) / exit_rates[i]

    state = int(rng.choice(r, p=params.pi))
    jump_times = [0.0]
    states = [state]
    t = 0.0
    while True:
        if exit_rates[state] <= 0:
            break  # absorbing
        t += rng.exponential(1.0 / exit_rates[state])
        if t >= horizon:
            break
        state = int(rng.choice(r, p=jump_probs[state]))
        jump_times.append(t)
        states.append(state)
    jump_times.append(float(horizon))

    return RegimePath(jump_times=jump_times, states=np.asarray(states) + 1)


def simulate_arrivals(path: RegimePath, lam, gamma: ExposureStepFunction,
                      seed: RandomSource = None) -> np.ndarray:
    """Arrivals given a regime path.

    On each regime interval the process is homogeneous Poisson with rate
    lambda_s in operational time: the count is Poisson(lambda_s * span) and
    the points are uniform order statistics on the operational-time span,
    mapped back to calendar time through the inverse of rho.
    """
    rng = _rng(seed)
    lam = np.asarray(lam, dtype=float)
    rho = np.asarray(operational_time(gamma, path.jump_times), dtype=float)
    spans = np.diff(rho)
    counts = rng.poisson(lam[path.states - 1] * spans)

    starts = np.repeat(rho[:-1], counts)
    widths = np.repeat(spans, counts)
    s = np.sort(starts + rng.uniform(size=starts.size) * widths)
    s = np.minimum(s, gamma.total_operational_time)
    return np.asarray(inverse_operational_time(gamma, s), dtype=float).reshape(-1)


def separate_ties(times: np.ndarray, jitter: Optional[float] = None):
    """Force strictly increasing times by nudging coincident entries forward."""
    jitter = SIMULATION_CONFIG['tie_jitter'] if jitter is None else jitter
    times = np.array(times, dtype=float)
    nudged = 0
    for k in range(1, times.size):
        if times[k] <= times[k - 1]:
            times[k] = times[k - 1] + jitter
            nudged += 1
    return times, nudged


def simulate_mmnpp(config: SimulationConfig) -> SimulationResult:
    path_seed, arrival_seed = derive_seeds(config.seed, 2)
    path = simulate_ctmc(config.params, config.horizon, path_seed)
    times = simulate_arrivals(path, config.params.lam, config.gamma, arrival_seed)

    times, nudged = separate_ties(times)
    if nudged:
        logger.warning(f"Separated {nudged} coincident arrival times by {SIMULATION_CONFIG['tie_jitter']:g}")
    logger.info(f"Simulated {times.size} arrivals over {len(path.states)} regime intervals")

    return SimulationResult(claim_times=times, path=path, jittered=nudged)


def superpose(stream_a, stream_b) -> np.ndarray:
    """Sorted merge of two arrival streams on the same horizon."""
    merged = np.concatenate([np.asarray(stream_a, dtype=float), np.asarray(stream_b, dtype=float)])
    return np.sort(merged, kind='mergesort')
