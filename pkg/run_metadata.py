# run_metadata.py
"""
Run Metadata Recorder for MMNPP calibration runs
Collects what each stage did and renders readable summary lines for manifests
"""

import uuid
from datetime import datetime
from typing import Dict, List, Any, Optional


class RunMetadata:
    """Collects calibration, diagnostic and warning activity for one run"""

    def __init__(self):
        self.session_id = str(uuid.uuid4())
        self.start_time = datetime.now()

        self.inputs = {}
        self.iterations = []
        self.fits = []
        self.tests = []
        self.order_steps = []
        self.warnings = []

    def record_inputs(self, n_claims: int, n_breakpoints: int, horizon: float):
        """Record the size of the data being processed"""
        self.inputs = {
            'n_claims': n_claims,
            'n_breakpoints': n_breakpoints,
            'horizon': horizon,
        }

    def record_iteration(self, order: int, iteration: int, loglik: float):
        self.iterations.append({
            'order': order,
            'iteration': iteration,
            'loglik': loglik,
        })

    def record_fit(self, order: int, iterations: int, converged: bool, loglik: float):
        self.fits.append({
            'order': order,
            'iterations': iterations,
            'converged': converged,
            'loglik': loglik,
            'timestamp': datetime.now().isoformat(),
        })

    def record_test(self, name: str, statistic: float, p_value: float, parameters: Optional[Dict] = None):
        self.tests.append({
            'name': name,
            'statistic': statistic,
            'p_value': p_value,
            'parameters': parameters or {},
        })

    def record_order_step(self, order: int, p_value: float, accepted: bool):
        self.order_steps.append({
            'order': order,
            'p_value': p_value,
            'accepted': accepted,
        })

    def record_warning(self, source: str, message: str):
        self.warnings.append({
            'source': source,
            'message': message,
            'timestamp': datetime.now().isoformat(),
        })

    def generate_summary(self) -> List[str]:
        """Generate a clean list of summary strings"""
        summary_lines = []

        if self.inputs:
            summary_lines.append(
                f"Input: {self.inputs['n_claims']} claims, {self.inputs['n_breakpoints']} exposure changes "
                f"over horizon {self.inputs['horizon']:g}"
            )

        for fit in self.fits:
            status = "converged" if fit['converged'] else "stopped at iteration limit"
            summary_lines.append(
                f"Order {fit['order']} fit {status} after {fit['iterations']} iterations "
                f"(log-likelihood {fit['loglik']:.4f})"
            )

        if self.order_steps:
            steps = ", ".join(
                f"order {s['order']}: p={s['p_value']:.3g}{' (accepted)' if s['accepted'] else ''}"
                for s in self.order_steps
            )
            summary_lines.append(f"Order search: {steps}")

        for test in self.tests:
            summary_lines.append(f"{test['name']}: statistic {test['statistic']:.4g}, p-value {test['p_value']:.4g}")

        if self.warnings:
            summary_lines.append(f"Warnings ({len(self.warnings)}):")
            for warning in self.warnings:
                summary_lines.append(f"- [{warning['source']}] {warning['message']}")

        return summary_lines

    def to_dict(self) -> Dict[str, Any]:
        return {
            'session_id': self.session_id,
            'started': self.start_time.isoformat(),
            'inputs': self.inputs,
            'iterations': self.iterations,
            'fits': self.fits,
            'order_steps': self.order_steps,
            'tests': self.tests,
            'warnings': self.warnings,
            'summary': self.generate_summary(),
        }


# Global instance
_run_metadata = None


def get_run_metadata() -> RunMetadata:
    """Get or create the global run metadata collector"""
    global _run_metadata
    if _run_metadata is None:
        _run_metadata = RunMetadata()
    return _run_metadata


def reset_run_metadata():
    """Reset for new run"""
    global _run_metadata
    _run_metadata = RunMetadata()


# Helper functions for easy integration
def record_inputs(n_claims: int, n_breakpoints: int, horizon: float):
    get_run_metadata().record_inputs(n_claims, n_breakpoints, horizon)


def record_iteration(order: int, iteration: int, loglik: float):
    get_run_metadata().record_iteration(order, iteration, loglik)


def record_fit(order: int, iterations: int, converged: bool, loglik: float):
    get_run_metadata().record_fit(order, iterations, converged, loglik)


def record_test(name: str, statistic: float, p_value: float, parameters: Optional[Dict] = None):
    get_run_metadata().record_test(name, statistic, p_value, parameters)


def record_order_step(order: int, p_value: float, accepted: bool):
    get_run_metadata().record_order_step(order, p_value, accepted)


def record_warning(source: str, message: str):
    get_run_metadata().record_warning(source, message)
