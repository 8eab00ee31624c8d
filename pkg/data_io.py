"""
File formats.

  events CSV        time
  exposure CSV      start_time,value        (first start_time is 0)
  regime path CSV   start_time,state        (the horizon closes the last interval)
  probabilities CSV time,state,prob_1..prob_r
  windows CSV       window_start,window_end,observed,expected,residual
  model JSON        {"order", "Q", "lambda", "pi"}

Floats are written with 17 significant digits so files read back exactly.
Line numbers in ParseError count the header as line 1.
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from core import validate_exposure, validate_params
from exceptions import MMNPPError, ParseError
from input_validator import validate_model_document
from models import ExposureStepFunction, ModelParams, RegimePath, ResidualSeries, StateProbabilitySeries

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'


def _read_table(path: str, columns: List[str]) -> pd.DataFrame:
    """Read a CSV whose header must contain `columns`, all numeric."""
    if not os.path.isfile(path):
        raise ParseError("file not found", path=path)
    try:
        frame = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ParseError("file is empty (a header line is required)", path=path, line=1)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ParseError(f"malformed CSV: {e}", path=path)

    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ParseError(f"missing column(s) {', '.join(missing)}; header is {list(frame.columns)}",
                         path=path, line=1)

    out = pd.DataFrame(index=frame.index)
    for column in columns:
        raw = frame[column]
        values = pd.to_numeric(raw, errors="coerce").astype(float)
        bad = ~np.isfinite(values.to_numpy())
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ParseError(f"column '{column}': cannot read {raw.iloc[row]!r} as a finite number",
                             path=path, line=row + 2)
        out[column] = values.astype(float)
    return out


def _write_table(path: str, frame: pd.DataFrame):
    _ensure_parent(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')


def _ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def spread_daily(times) -> np.ndarray:
    """Spread the c events recorded on day d evenly: d + (j + 0.5) / c."""
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return times.copy()
    days = np.floor(times)
    unique_days, counts = np.unique(days, return_counts=True)
    spread = np.concatenate([day + (np.arange(c) + 0.5) / c for day, c in zip(unique_days, counts)])
    return spread


def read_events(path: str, spread: bool = False) -> np.ndarray:
    """Claim times from an events CSV, sorted ascending."""
    times = _read_table(path, ['time'])['time'].to_numpy()
    if np.any(np.diff(times) < 0):
        logger.info(f"Sorting {times.size} unsorted event times from {path}")
        times = np.sort(times, kind='mergesort')
    if spread:
        times = spread_daily(times)
    return times


def write_events(path: str, times):
    _write_table(path, pd.DataFrame({'time': np.asarray(times, dtype=float)}))


def read_exposure(path: str, horizon: float) -> ExposureStepFunction:
    table = _read_table(path, ['start_time', 'value'])
    if table.empty:
        raise ParseError("exposure file has no pieces", path=path, line=2)
    breakpoints = table['start_time'].to_numpy()
    dropped = int(np.count_nonzero(breakpoints >= horizon))
    if dropped:
        logger.warning(f"Dropping {dropped} exposure pieces starting at or after horizon {horizon:g}")
    return validate_exposure(breakpoints, table['value'].to_numpy(), horizon, truncate=True)


def write_exposure(path: str, gamma: ExposureStepFunction):
    _write_table(path, pd.DataFrame({'start_time': gamma.breakpoints, 'value': gamma.values}))


def read_model(path: str) -> ModelParams:
    if not os.path.isfile(path):
        raise ParseError("file not found", path=path)
    with open(path, 'r') as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", path=path, line=e.lineno)

    result = validate_model_document(document)
    for warning in result['warnings']:
        logger.warning(f"{path}: {warning}")
    if not result['valid']:
        raise ParseError("; ".join(result['errors']), path=path)
    return validate_params(document['Q'], document['lambda'], document['pi'], order=document['order'])


def write_model(path: str, params: ModelParams):
    write_json(path, params.to_dict())


def read_regime_path(path: str, horizon: float) -> RegimePath:
    table = _read_table(path, ['start_time', 'state'])
    if table.empty:
        raise ParseError("regime path has no intervals", path=path, line=2)
    starts = table['start_time'].to_numpy()
    if starts[-1] >= horizon:
        raise ParseError(f"interval start {starts[-1]:g} is not before horizon {horizon:g}", path=path,
                         line=len(starts) + 1)
    jump_times = np.append(starts, float(horizon))
    return RegimePath(jump_times=jump_times, states=table['state'].to_numpy().astype(np.int64))


def write_regime_path(path: str, regime_path: RegimePath):
    _write_table(path, pd.DataFrame({
        'start_time': regime_path.jump_times[:-1],
        'state': regime_path.states,
    }))


def write_state_probabilities(path: str, series: StateProbabilitySeries, states):
    frame = pd.DataFrame({'time': series.times, 'state': np.asarray(states, dtype=np.int64)})
    for i in range(series.probs.shape[1]):
        frame[f'prob_{i + 1}'] = series.probs[:, i]
    _write_table(path, frame)


def read_state_probabilities(path: str, order: int) -> pd.DataFrame:
    return _read_table(path, ['time', 'state'] + [f'prob_{i + 1}' for i in range(order)])


def write_window_counts(path: str, residuals: ResidualSeries):
    _write_table(path, pd.DataFrame({
        'window_start': residuals.grid.starts,
        'window_end': residuals.grid.ends,
        'observed': residuals.observed,
        'expected': residuals.expected,
        'residual': residuals.residuals,
    }))


def read_window_counts(path: str) -> pd.DataFrame:
    return _read_table(path, ['window_start', 'window_end', 'observed', 'expected', 'residual'])


def _jsonable(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def to_json(document: Dict[str, Any]) -> str:
    return json.dumps(document, indent=2, default=_jsonable)


def write_json(path: str, document: Dict[str, Any]):
    _ensure_parent(path)
    with open(path, 'w') as f:
        f.write(to_json(document))
        f.write('\n')


def read_json(path: str) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise ParseError("file not found", path=path)
    with open(path, 'r') as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", path=path, line=e.lineno)


def error_document(error: Exception, subcommand: Optional[str] = None) -> Dict[str, Any]:
    if isinstance(error, MMNPPError):
        document = error.to_dict()
    else:
        document = {'error': type(error).__name__, 'message': str(error), 'exit_code': 1, 'context': {}}
    if subcommand:
        document['subcommand'] = subcommand
    return document
