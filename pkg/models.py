from functools import cached_property
from typing import List, Optional, Literal, Dict, Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator


def _readonly(value: Any, dtype=float) -> np.ndarray:
    array = np.array(value, dtype=dtype)
    array.flags.writeable = False
    return array


class ArrayModel(BaseModel):
    """Immutable model holding numpy arrays."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True, populate_by_name=True)


class ModelParams(ArrayModel):
    order: int = Field(description="Number of hidden regimes r")
    Q: np.ndarray = Field(description="r x r generator, rows sum to zero (1/time)")
    lam: np.ndarray = Field(alias='lambda', description="Baseline intensities per regime at gamma=1")
    pi: np.ndarray = Field(description="Initial regime distribution")

    @field_validator('Q', 'lam', 'pi', mode='before')
    @classmethod
    def _as_array(cls, value):
        return _readonly(value)

    @property
    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.Q)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'order': int(self.order),
            'Q': self.Q.tolist(),
            'lambda': self.lam.tolist(),
            'pi': self.pi.tolist(),
        }

    def permuted(self, perm: List[int]) -> 'ModelParams':
        """Relabel states: new state i is old state perm[i]."""
        perm = np.asarray(perm)
        return ModelParams(order=self.order, Q=self.Q[np.ix_(perm, perm)],
                           lam=self.lam[perm], pi=self.pi[perm])


class ExposureStepFunction(ArrayModel):
    breakpoints: np.ndarray = Field(description="Piece start times, first is 0, strictly increasing")
    values: np.ndarray = Field(description="Positive exposure multiplier per piece")
    horizon: float = Field(description="End of observation T")

    @field_validator('breakpoints', 'values', mode='before')
    @classmethod
    def _as_array(cls, value):
        return _readonly(value)

    @cached_property
    def cumulative(self) -> np.ndarray:
        """Operational time at each breakpoint, plus rho(T) as the last entry."""
        edges = np.append(self.breakpoints, self.horizon)
        return _readonly(np.concatenate([[0.0], np.cumsum(self.values * np.diff(edges))]))

    @property
    def total_operational_time(self) -> float:
        return float(self.cumulative[-1])

    @property
    def interior_breakpoints(self) -> np.ndarray:
        return self.breakpoints[1:]

    def scaled(self, factor: float) -> 'ExposureStepFunction':
        return ExposureStepFunction(breakpoints=self.breakpoints, values=self.values * factor,
                                    horizon=self.horizon)


class EventSequence(ArrayModel):
    times: np.ndarray = Field(description="Merged entry times, nondecreasing")
    flags: np.ndarray = Field(description="1 = claim, 0 = exposure change")
    gamma_before: np.ndarray = Field(description="Exposure on the interval ending at each entry")
    gamma_after: np.ndarray = Field(description="Exposure in force from each entry onwards")
    gamma_initial: float = Field(gt=0, description="Exposure at time 0")
    horizon: float = Field(description="End of observation T")

    @field_validator('times', 'gamma_before', 'gamma_after', mode='before')
    @classmethod
    def _as_array(cls, value):
        return _readonly(value)

    @field_validator('flags', mode='before')
    @classmethod
    def _as_flags(cls, value):
        return _readonly(value, dtype=np.int8)

    @property
    def n(self) -> int:
        return int(self.times.size)

    @property
    def n_claims(self) -> int:
        return int(np.count_nonzero(self.flags == 1))

    @property
    def claim_times(self) -> np.ndarray:
        return self.times[self.flags == 1]


class RegimePath(ArrayModel):
    jump_times: np.ndarray = Field(description="u_0=0 < u_1 < ... < u_{m+1}=T")
    states: np.ndarray = Field(description="State label (1..r) on each interval [u_{k-1}, u_k)")

    @field_validator('jump_times', mode='before')
    @classmethod
    def _as_array(cls, value):
        return _readonly(value)

    @field_validator('states', mode='before')
    @classmethod
    def _as_states(cls, value):
        return _readonly(value, dtype=np.int64)

    @property
    def horizon(self) -> float:
        return float(self.jump_times[-1])

    @property
    def holding_times(self) -> np.ndarray:
        return np.diff(self.jump_times)

    def states_at(self, times) -> np.ndarray:
        index = np.searchsorted(self.jump_times, np.asarray(times, dtype=float), side='right') - 1
        return self.states[np.clip(index, 0, self.states.size - 1)]

    def occupancy(self, order: int) -> np.ndarray:
        """Calendar time spent in each state."""
        return np.bincount(self.states - 1, weights=self.holding_times, minlength=order)


class SimulationConfig(ArrayModel):
    params: ModelParams
    gamma: ExposureStepFunction
    horizon: float = Field(gt=0, description="Simulation horizon T")
    seed: int = Field(description="Root seed; sub-streams are spawned from it")


class SimulationResult(ArrayModel):
    claim_times: np.ndarray
    path: RegimePath
    jittered: int = Field(default=0, description="Number of coincident arrivals separated by jitter")

    @field_validator('claim_times', mode='before')
    @classmethod
    def _as_array(cls, value):
        return _readonly(value)


class TransitionKernels(ArrayModel):
    fbar: np.ndarray = Field(description="Survival kernel exp[(Q - Lambda gamma) dt], (r,r) or (m,r,r)")
    fdelta: np.ndarray = Field(description="fbar * Lambda gamma at claims, fbar at exposure changes")


class RecursionState(ArrayModel):
    """Scaled forward/backward quantities over the merged steps.

    Step k = 1..m covers (t_{k-1}, t_k]; the last step is the survival
    from the final entry to the horizon. L has rows 0..m with L[0] = pi,
    R has rows 0..m+1 with R[m+1] = 1; row R[0] equals R[1] (a zero-length
    identity step at time 0).
    """
    times: np.ndarray
    flags: np.ndarray
    dt: np.ndarray
    gamma_interval: np.ndarray
    gamma_event: np.ndarray
    L: np.ndarray
    R: np.ndarray
    c: np.ndarray
    kernels: TransitionKernels

    @property
    def m(self) -> int:
        return int(self.c.size)

    @property
    def order(self) -> int:
        return int(self.L.shape[1])


class EStepEstimators(ArrayModel):
    a_hat: np.ndarray = Field(alias='aHat', description="Expected regime-change counts")
    n_hat: np.ndarray = Field(alias='nHat', description="Expected claims per regime")
    t_hat: np.ndarray = Field(alias='tHat', description="Expected calendar time per regime")
    t_star_hat: np.ndarray = Field(alias='tStarHat', description="Expected operational time per regime")
    occupancy: np.ndarray = Field(description="Per-step expected calendar time in each regime, (m, r)")

    @field_validator('a_hat', 'n_hat', 't_hat', 't_star_hat', 'occupancy', mode='before')
    @classmethod
    def _as_array(cls, value):
        return _readonly(value)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'aHat': self.a_hat.tolist(),
            'nHat': self.n_hat.tolist(),
            'tHat': self.t_hat.tolist(),
            'tStarHat': self.t_star_hat.tolist(),
        }


class FitResult(ArrayModel):
    params: ModelParams
    loglik: List[float] = Field(description="Log-likelihood per iteration")
    iterations: int
    converged: bool
    stop_reason: Literal['tolerance', 'max_iter'] = 'max_iter'
    recursion: RecursionState
    estimators: EStepEstimators


class StateProbabilitySeries(ArrayModel):
    times: np.ndarray
    flags: np.ndarray
    probs: np.ndarray = Field(description="(m, r) state probabilities, rows sum to 1")
    kind: Literal['smoothed', 'filtered'] = 'smoothed'

    @field_validator('times', 'probs', mode='before')
    @classmethod
    def _as_array(cls, value):
        return _readonly(value)

    @field_validator('flags', mode='before')
    @classmethod
    def _as_flags(cls, value):
        return _readonly(value, dtype=np.int8)

    def claims_only(self) -> 'StateProbabilitySeries':
        mask = self.flags == 1
        return StateProbabilitySeries(times=self.times[mask], flags=self.flags[mask],
                                      probs=self.probs[mask], kind=self.kind)


class WindowGrid(ArrayModel):
    boundaries: np.ndarray = Field(description="Strictly increasing window edges covering [0, T]")

    @field_validator('boundaries', mode='before')
    @classmethod
    def _as_array(cls, value):
        return _readonly(value)

    @property
    def starts(self) -> np.ndarray:
        return self.boundaries[:-1]

    @property
    def ends(self) -> np.ndarray:
        return self.boundaries[1:]

    @property
    def size(self) -> int:
        return int(self.boundaries.size - 1)


class ResidualSeries(ArrayModel):
    grid: WindowGrid
    observed: np.ndarray
    expected: np.ndarray
    residuals: np.ndarray


class TestReport(BaseModel):
    __test__ = False  # not a pytest class

    name: str = Field(description="Test name")
    statistic: float
    p_value: float = Field(ge=0.0, le=1.0)
    parameters: Dict[str, Any] = Field(default_factory=dict)


class OrderSelectionResult(ArrayModel):
    chosen_order: int
    orders_tried: List[int]
    fits: Dict[int, FitResult]
    reports: Dict[int, TestReport]
    criteria: Dict[int, Dict[str, float]]
    evidence: Optional[Dict[str, Any]] = None
    converged: bool = Field(description="False when max_order was reached without white-noise residuals")


class RunConfig(BaseModel):
    subcommand: Literal['simulate', 'fit', 'decode', 'select-order', 'diagnose']
    events: Optional[str] = None
    exposure: Optional[str] = None
    model: Optional[str] = None
    init_model: Optional[str] = None
    preset: Optional[str] = None
    horizon: Optional[float] = None
    seed: int
    order: Optional[int] = None
    tol: float
    max_iter: int
    stop_criterion: Literal['loglik', 'params'] = 'loglik'
    window: float
    alpha: float
    start_order: int
    max_order: int
    evidence_check: bool = True
    lags: List[int] = Field(default_factory=list)
    spread_daily: bool = False
    threads: int = 1
    out_dir: str
