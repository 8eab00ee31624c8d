import logging
import logging.handlers
import os
from typing import Dict, Any, Optional

# EM calibration
FIT_CONFIG = {
    'tol_loglik': float(os.getenv('MMNPP_TOL_LOGLIK', '1e-4')),
    'max_iter': int(os.getenv('MMNPP_MAX_ITER', '500')),
    'stop_criterion': os.getenv('MMNPP_STOP_CRITERION', 'loglik'),  # 'loglik' or 'params'
    'tol_params': float(os.getenv('MMNPP_TOL_PARAMS', '1e-6')),
    'starved_state_fraction': float(os.getenv('MMNPP_STARVED_FRACTION', '1e-8')),
    'underflow_floor': 1e-300,
    'monotonicity_slack': 1e-8,
    'init_window': float(os.getenv('MMNPP_INIT_WINDOW', '1.0')),
    'init_mixing_rate': float(os.getenv('MMNPP_INIT_MIXING_RATE', '0.1')),
}

# Parameter validation tolerances
VALIDATION_RULES = {
    'row_sum_normalize_tol': 1e-9,
    'row_sum_tol': 1e-12,
    'probability_tol': 1e-12,
}

# Simulation
SIMULATION_CONFIG = {
    'default_seed': int(os.getenv('MMNPP_SEED', '20240101')),
    'tie_jitter': 1e-12,
}

# Residual diagnostics and order selection
DIAGNOSTICS_CONFIG = {
    'alpha': float(os.getenv('MMNPP_ALPHA', '0.05')),
    'max_order': int(os.getenv('MMNPP_MAX_ORDER', '10')),
    'start_order': int(os.getenv('MMNPP_START_ORDER', '2')),
    'ljung_box_lags': [int(x) for x in os.getenv('MMNPP_LJUNG_BOX_LAGS', '91,182,365').split(',')],
    'dispersion_threshold': float(os.getenv('MMNPP_DISPERSION_THRESHOLD', '1.2')),
    'runs_alpha': float(os.getenv('MMNPP_RUNS_ALPHA', '0.05')),
    'runs_center': os.getenv('MMNPP_RUNS_CENTER', 'zero'),  # 'zero' or 'median'
    'window': float(os.getenv('MMNPP_WINDOW', '1.0')),
}

# Worker pool for the E-step
RUNTIME_CONFIG = {
    'threads': int(os.getenv('MMNPP_THREADS', '1')),
    'chunk_size': int(os.getenv('MMNPP_CHUNK_SIZE', '4096')),
}

# Logging Configuration
LOGGING_CONFIG = {
    'level': os.getenv('LOG_LEVEL', 'INFO'),
    'format': os.getenv('LOG_FORMAT', '%(asctime)s - %(name)s - %(levelname)s - %(message)s'),
    'file_path': os.getenv('LOG_FILE_PATH'),  # unset: stderr only
    'max_file_size': int(os.getenv('LOG_MAX_FILE_SIZE', '10485760')),  # 10MB
    'backup_count': int(os.getenv('LOG_BACKUP_COUNT', '5')),
}


def get_config() -> Dict[str, Any]:
    """Get complete configuration dictionary"""
    return {
        'fit': FIT_CONFIG,
        'validation': VALIDATION_RULES,
        'simulation': SIMULATION_CONFIG,
        'diagnostics': DIAGNOSTICS_CONFIG,
        'runtime': RUNTIME_CONFIG,
        'logging': LOGGING_CONFIG,
    }


def validate_config() -> bool:
    """Validate configuration settings"""
    errors = []

    if FIT_CONFIG['stop_criterion'] not in ('loglik', 'params'):
        errors.append(f"Unknown stop criterion: {FIT_CONFIG['stop_criterion']}")
    if FIT_CONFIG['tol_loglik'] <= 0 or FIT_CONFIG['tol_params'] <= 0:
        errors.append("Stopping tolerances must be positive")
    if FIT_CONFIG['max_iter'] < 1:
        errors.append("max_iter must be at least 1")

    if not 0 < DIAGNOSTICS_CONFIG['alpha'] < 1:
        errors.append(f"Invalid alpha: {DIAGNOSTICS_CONFIG['alpha']}")
    if DIAGNOSTICS_CONFIG['start_order'] > DIAGNOSTICS_CONFIG['max_order']:
        errors.append("start_order exceeds max_order")
    if DIAGNOSTICS_CONFIG['runs_center'] not in ('zero', 'median'):
        errors.append(f"Unknown runs-test center: {DIAGNOSTICS_CONFIG['runs_center']}")
    if DIAGNOSTICS_CONFIG['window'] <= 0:
        errors.append("Residual window must be positive")

    if RUNTIME_CONFIG['threads'] < 1:
        errors.append("threads must be at least 1")

    if errors:
        logger = logging.getLogger(__name__)
        logger.error("Configuration errors found:")
        for error in errors:
            logger.error(f"  - {error}")
        return False

    return True


def configure_logging(level: Optional[str] = None, file_path: Optional[str] = None) -> None:
    """Install handlers on the root logger from LOGGING_CONFIG."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)

    formatter = logging.Formatter(LOGGING_CONFIG['format'])
    stream = logging.StreamHandler()
    stream.setFormatter(formatter)
    root.addHandler(stream)

    file_path = file_path or LOGGING_CONFIG['file_path']
    if file_path:
        rotating = logging.handlers.RotatingFileHandler(
            file_path,
            maxBytes=LOGGING_CONFIG['max_file_size'],
            backupCount=LOGGING_CONFIG['backup_count'],
        )
        rotating.setFormatter(formatter)
        root.addHandler(rotating)

    root.setLevel((level or LOGGING_CONFIG['level']).upper())
