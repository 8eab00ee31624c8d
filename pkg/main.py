# main.py - command-line entry point for simulation, calibration and diagnostics

import argparse
import logging
import math
import os
import sys
import traceback
from typing import Dict, List, Optional

import numpy as np

from calibrate import fit, fit_report, forward_backward
from config import (
    DIAGNOSTICS_CONFIG, FIT_CONFIG, RUNTIME_CONFIG, SIMULATION_CONFIG, configure_logging, get_config, validate_config,
)
from core import build_event_sequence, constant_exposure
from data_io import (
    error_document, read_events, read_exposure, read_model, to_json, write_events, write_exposure, write_json,
    write_model, write_regime_path, write_state_probabilities, write_window_counts,
)
from decode import make_grid, most_likely_regimes, smoothed_probs
from diagnostics import diagnostic_report, model_residuals, select_order
from exceptions import InputError, MMNPPError, NumericalError
from models import RegimePath, RunConfig, SimulationConfig
from presets import PRESETS, load_preset
from run_metadata import get_run_metadata, record_warning, reset_run_metadata
from simulate import simulate_mmnpp

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2


def _run_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        subcommand=args.command,
        events=getattr(args, 'events', None),
        exposure=getattr(args, 'exposure', None),
        model=getattr(args, 'model', None),
        init_model=getattr(args, 'init_model', None),
        preset=getattr(args, 'preset', None),
        horizon=getattr(args, 'horizon', None),
        seed=args.seed,
        order=getattr(args, 'order', None),
        tol=args.tol,
        max_iter=args.max_iter,
        stop_criterion=args.stop_criterion,
        window=args.window,
        alpha=getattr(args, 'alpha', DIAGNOSTICS_CONFIG['alpha']),
        start_order=getattr(args, 'start_order', DIAGNOSTICS_CONFIG['start_order']),
        max_order=getattr(args, 'max_order', DIAGNOSTICS_CONFIG['max_order']),
        evidence_check=not getattr(args, 'no_evidence_check', False),
        lags=getattr(args, 'lags', None) or [],
        spread_daily=getattr(args, 'spread_daily', False),
        threads=args.threads,
        out_dir=args.out_dir,
    )


def _write_manifest(args: argparse.Namespace, outputs: List[str], extra: Optional[Dict] = None):
    manifest = {
        'subcommand': args.command,
        'config': _run_config(args).model_dump(),
        'outputs': outputs,
        'settings': get_config(),
        'run': get_run_metadata().to_dict(),
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(args.out_dir, 'manifest.json'), manifest)


def _out(args: argparse.Namespace, name: str) -> str:
    return os.path.join(args.out_dir, name)


def _load_claims(args: argparse.Namespace) -> np.ndarray:
    times = read_events(args.events, spread=args.spread_daily)
    if times.size == 0:
        raise InputError(f"{args.events} contains no events")
    return times


def _resolve_horizon(args: argparse.Namespace, claims: np.ndarray) -> float:
    if args.horizon is not None:
        return float(args.horizon)
    horizon = float(math.ceil(claims[-1]))
    if horizon <= 0:
        horizon = 1.0
    message = f"--horizon not given; using {horizon:g} (ceiling of the last event time)"
    logger.warning(message)
    record_warning('cli', message)
    return horizon


def _load_exposure(args: argparse.Namespace, horizon: float):
    if args.exposure is None:
        logger.info("No exposure file given; using constant exposure 1")
        return constant_exposure(horizon)
    return read_exposure(args.exposure, horizon)


def _load_data(args: argparse.Namespace):
    claims = _load_claims(args)
    horizon = _resolve_horizon(args, claims)
    gamma = _load_exposure(args, horizon)
    events = build_event_sequence(claims, gamma)
    return events, gamma


def _fit_options(args: argparse.Namespace) -> Dict:
    return {
        'tol_loglik': args.tol,
        'max_iter': args.max_iter,
        'stop_criterion': args.stop_criterion,
    }


def cmd_simulate(args: argparse.Namespace) -> int:
    """Simulate a regime path and claim times; write events, path and manifest."""
    outputs = []
    if args.preset:
        params, gamma, horizon = load_preset(args.preset)
        if args.horizon is not None and args.horizon != horizon:
            raise InputError(f"preset {args.preset} fixes the horizon at {horizon:g}")
        write_model(_out(args, 'model.json'), params)
        write_exposure(_out(args, 'exposure.csv'), gamma)
        outputs += ['model.json', 'exposure.csv']
    else:
        if args.model is None or args.horizon is None:
            raise InputError("simulate needs --model and --horizon (or --preset)")
        params = read_model(args.model)
        horizon = float(args.horizon)
        if horizon < 0:
            raise InputError(f"horizon must be nonnegative, got {horizon:g}")
        gamma = _load_exposure(args, horizon) if horizon > 0 else None

    if horizon == 0:
        write_events(_out(args, 'events.csv'), [])
        write_regime_path(_out(args, 'regime_path.csv'), RegimePath(jump_times=[], states=[]))
        outputs += ['events.csv', 'regime_path.csv']
        _write_manifest(args, outputs, {'n_events': 0, 'horizon': 0.0})
        return EXIT_OK

    result = simulate_mmnpp(SimulationConfig(params=params, gamma=gamma, horizon=horizon, seed=args.seed))
    write_events(_out(args, 'events.csv'), result.claim_times)
    write_regime_path(_out(args, 'regime_path.csv'), result.path)
    outputs += ['events.csv', 'regime_path.csv']
    _write_manifest(args, outputs, {'n_events': int(result.claim_times.size), 'jittered': result.jittered,
                                     'horizon': horizon})
    logger.info(f"Wrote {result.claim_times.size} events to {_out(args, 'events.csv')}")
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    """Calibrate a model by EM; exit 0 only when the stopping tolerance was met."""
    events, gamma = _load_data(args)
    init = read_model(args.init_model) if args.init_model else None
    order = args.order if args.order is not None else (init.order if init is not None else None)
    if order is None:
        raise InputError("fit needs --order or --init-model")

    result = fit(events, gamma, order, init=init, threads=args.threads, **_fit_options(args))
    write_model(_out(args, 'model.json'), result.params)
    write_json(_out(args, 'fit_report.json'), fit_report(result))
    _write_manifest(args, ['model.json', 'fit_report.json'],
                    {'converged': result.converged, 'iterations': result.iterations})
    return EXIT_OK if result.converged else EXIT_NUMERICAL


def cmd_decode(args: argparse.Namespace) -> int:
    """Most likely regime at each claim plus per-window observed and expected counts."""
    params = read_model(args.model)
    events, gamma = _load_data(args)
    recursion = forward_backward(params, events)
    claims = smoothed_probs(recursion).claims_only()
    write_state_probabilities(_out(args, 'states.csv'), claims, most_likely_regimes(claims))

    grid = make_grid(gamma.horizon, args.window)
    residuals = model_residuals(params, recursion, gamma, grid, method=args.method)
    write_window_counts(_out(args, 'windows.csv'), residuals)
    _write_manifest(args, ['states.csv', 'windows.csv'])
    return EXIT_OK


def cmd_select_order(args: argparse.Namespace) -> int:
    """Increase the number of regimes until the residuals look like white noise."""
    events, gamma = _load_data(args)
    grid = make_grid(gamma.horizon, args.window)
    selection = select_order(events, gamma, grid, alpha=args.alpha, max_order=args.max_order,
                             start_order=args.start_order, evidence_check=not args.no_evidence_check,
                             threads=args.threads, **_fit_options(args))

    chosen = selection.fits[selection.chosen_order]
    write_model(_out(args, 'model.json'), chosen.params)
    residuals = model_residuals(chosen.params, chosen.recursion, gamma, grid)
    write_window_counts(_out(args, 'windows.csv'), residuals)
    document = {
        'chosenOrder': selection.chosen_order,
        'converged': selection.converged,
        'ordersTried': selection.orders_tried,
        'evidence': selection.evidence,
        'fits': {str(order): fit_report(result) for order, result in selection.fits.items()},
        'reports': {str(order): report.model_dump() for order, report in selection.reports.items()},
        'criteria': {str(order): values for order, values in selection.criteria.items()},
    }
    write_json(_out(args, 'selection.json'), document)
    if not selection.converged:
        logger.warning(f"No order up to {args.max_order} produced white-noise residuals; "
                       f"reporting order {selection.chosen_order}")
    _write_manifest(args, ['model.json', 'windows.csv', 'selection.json'],
                    {'chosenOrder': selection.chosen_order, 'converged': selection.converged})
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    """Residual statistics for a fitted model."""
    params = read_model(args.model)
    events, gamma = _load_data(args)
    recursion = forward_backward(params, events)
    grid = make_grid(gamma.horizon, args.window)
    report, residuals = diagnostic_report(params, recursion, gamma, grid, lags=args.lags)
    write_json(_out(args, 'diagnostics.json'), report)
    write_window_counts(_out(args, 'windows.csv'), residuals)
    _write_manifest(args, ['diagnostics.json', 'windows.csv'])
    return EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'fit': cmd_fit,
    'decode': cmd_decode,
    'select-order': cmd_select_order,
    'diagnose': cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--out-dir', default='.', help='Directory for output files')
    common.add_argument('--seed', type=int, default=SIMULATION_CONFIG['default_seed'])
    common.add_argument('--threads', type=int, default=RUNTIME_CONFIG['threads'],
                        help='Worker threads for E-step integrals')
    common.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR')
    common.add_argument('--horizon', type=float, default=None, help='End of the observation window T')
    common.add_argument('--tol', type=float, default=FIT_CONFIG['tol_loglik'])
    common.add_argument('--max-iter', type=int, default=FIT_CONFIG['max_iter'])
    common.add_argument('--stop-criterion', choices=['loglik', 'params'], default=FIT_CONFIG['stop_criterion'])
    common.add_argument('--window', type=float, default=DIAGNOSTICS_CONFIG['window'],
                        help='Residual window width')

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument('--events', required=True, help='Events CSV (column: time)')
    data.add_argument('--exposure', default=None, help='Exposure CSV (columns: start_time,value)')
    data.add_argument('--spread-daily', action='store_true',
                      help='Spread events recorded on the same day evenly through that day')

    parser = argparse.ArgumentParser(prog='mmnpp', description='Markov-modulated non-homogeneous Poisson processes')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', parents=[common], help='Simulate claim arrivals')
    p.add_argument('--model', default=None, help='Model JSON')
    p.add_argument('--exposure', default=None, help='Exposure CSV (default: constant 1)')
    p.add_argument('--preset', choices=sorted(PRESETS), default=None)

    p = sub.add_parser('fit', parents=[common, data], help='Calibrate by EM')
    p.add_argument('--order', type=int, default=None)
    p.add_argument('--init-model', default=None, help='Starting model JSON')

    p = sub.add_parser('decode', parents=[common, data], help='Most likely regimes and expected counts')
    p.add_argument('--model', required=True)
    p.add_argument('--method', choices=['interpolate', 'exact'], default='interpolate')

    p = sub.add_parser('select-order', parents=[common, data], help='Choose the number of regimes')
    p.add_argument('--alpha', type=float, default=DIAGNOSTICS_CONFIG['alpha'])
    p.add_argument('--start-order', type=int, default=DIAGNOSTICS_CONFIG['start_order'])
    p.add_argument('--max-order', type=int, default=DIAGNOSTICS_CONFIG['max_order'])
    p.add_argument('--no-evidence-check', action='store_true')

    p = sub.add_parser('diagnose', parents=[common, data], help='Residual diagnostics for a fitted model')
    p.add_argument('--model', required=True)
    p.add_argument('--lags', type=int, nargs='+', default=None,
                   help=f"Ljung-Box lags (default {DIAGNOSTICS_CONFIG['ljung_box_lags']})")

    return parser


def _fail(args: argparse.Namespace, error: Exception, exit_code: int) -> int:
    document = error_document(error, args.command)
    document['exit_code'] = exit_code
    try:
        write_json(_out(args, 'error.json'), document)
    except OSError as e:
        logger.error(f"Could not write error.json: {e}")
    print(to_json(document), file=sys.stderr)
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    reset_run_metadata()

    if args.threads < 1:
        parser.error("--threads must be at least 1")
    if not validate_config():
        return _fail(args, InputError("invalid configuration in MMNPP_* environment variables"), EXIT_USAGE)

    try:
        os.makedirs(args.out_dir, exist_ok=True)
        return COMMANDS[args.command](args)
    except InputError as e:
        logger.error(f"{args.command} failed: {e}")
        return _fail(args, e, EXIT_USAGE)
    except NumericalError as e:
        logger.error(f"{args.command} failed: {e}")
        return _fail(args, e, EXIT_NUMERICAL)
    except MMNPPError as e:
        return _fail(args, e, e.exit_code)
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return _fail(args, e, EXIT_USAGE)
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}")
        traceback.print_exc()
        return _fail(args, e, EXIT_NUMERICAL)


if __name__ == '__main__':
    sys.exit(main())
