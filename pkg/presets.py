# Named parameter sets for simulation runs

import numpy as np

from core import validate_exposure, validate_params
from exceptions import InputError
from models import ExposureStepFunction, ModelParams

# Three regimes with well-separated claim rates, exposure cycling through
# four levels every 100 time units over a 1000-unit horizon
SIMULATION_STUDY = {
    "Q": [
        [-0.8, 0.5, 0.3],
        [0.6, -1.0, 0.4],
        [0.3, 0.5, -0.8],
    ],
    "lambda": [5.0, 10.0, 20.0],
    "pi": [1 / 3, 1 / 3, 1 / 3],
    "horizon": 1000.0,
    "exposure_period": 100.0,
    "exposure_levels": [1.0, 1.5, 2.0, 1.5],
}

PRESETS = {
    "simulation-study": SIMULATION_STUDY,
}


def cycling_exposure(horizon: float, period: float, levels) -> ExposureStepFunction:
    """Exposure stepping through `levels` in turn, one level per period."""
    starts = np.arange(0.0, horizon, period)
    values = np.resize(np.asarray(levels, dtype=float), starts.size)
    return validate_exposure(starts, values, horizon)


def load_preset(name: str):
    """Model parameters, exposure and horizon for a named preset."""
    if name not in PRESETS:
        raise InputError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    preset = PRESETS[name]
    params: ModelParams = validate_params(preset["Q"], preset["lambda"], preset["pi"])
    gamma = cycling_exposure(preset["horizon"], preset["exposure_period"], preset["exposure_levels"])
    return params, gamma, preset["horizon"]
