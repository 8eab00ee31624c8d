"""
Small dense matrix-exponential kernels.

expm delegates to scipy's scaling-and-squaring diagonal Pade scheme (orders
3..13 chosen from the 1-norm, no eigendecomposition, so defective Q - Lambda
gamma is fine). The Van Loan integral

    int_0^t exp(A (t - s)) B exp(A s) ds

is the upper-right block of exp(C t) with C = [[A, B], [0, A]].
"""

import numpy as np
from scipy.linalg import expm as _scipy_expm

from exceptions import DimensionMismatch, InputError, NonFinite, NumericalError

BLOCK_CONSISTENCY_TOL = 1e-10


def _as_square(A, name: str = 'A') -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise DimensionMismatch(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFinite(f"{name} has non-finite entries")
    return A


def _as_square_stack(stack, name: str = 'A') -> np.ndarray:
    stack = np.asarray(stack, dtype=float)
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2] or stack.shape[1] < 1:
        raise DimensionMismatch(f"{name} must have shape (m, d, d), got {stack.shape}")
    if not np.all(np.isfinite(stack)):
        raise NonFinite(f"{name} has non-finite entries")
    return stack


def expm(A) -> np.ndarray:
    """Matrix exponential of a square matrix (exact scalar exp when d = 1)."""
    A = _as_square(A)
    if A.shape[0] == 1:
        return np.exp(A)
    return _scipy_expm(A)


def expm_batch(stack) -> np.ndarray:
    """Matrix exponentials of a (m, d, d) stack."""
    stack = _as_square_stack(stack)
    if stack.shape[0] == 0:
        return stack.copy()
    if stack.shape[1] == 1:
        return np.exp(stack)
    return _scipy_expm(stack)


def van_loan_block(A, B) -> np.ndarray:
    """Assemble [[A, B], [0, A]] (last two axes; leading axes are batched)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise DimensionMismatch(f"A {A.shape} and B {B.shape} must have the same shape")
    d = A.shape[-1]
    C = np.zeros(A.shape[:-2] + (2 * d, 2 * d))
    C[..., :d, :d] = A
    C[..., :d, d:] = B
    C[..., d:, d:] = A
    return C


def _check_blocks(E: np.ndarray, d: int):
    upper, lower = E[..., :d, :d], E[..., d:, d:]
    scale = np.maximum(1.0, np.abs(upper).max(axis=(-2, -1)))
    gap = np.abs(upper - lower).max(axis=(-2, -1)) / scale
    if np.any(gap > BLOCK_CONSISTENCY_TOL):
        raise NumericalError(f"Van Loan diagonal blocks disagree by {float(np.max(gap)):.3e}")


def van_loan_integral(A, B, t: float) -> np.ndarray:
    A = _as_square(A)
    B = _as_square(B, 'B')
    if A.shape != B.shape:
        raise DimensionMismatch(f"A {A.shape} and B {B.shape} must have the same shape")
    t = float(t)
    if not np.isfinite(t):
        raise NonFinite("t must be finite")
    if t < 0:
        raise InputError(f"t must be nonnegative, got {t}")
    d = A.shape[0]
    if t == 0.0:
        return np.zeros((d, d))

    E = _scipy_expm(van_loan_block(A, B) * t)
    _check_blocks(E, d)
    return E[:d, d:].copy()


def van_loan_batch(A_stack, B_stack, t_stack) -> np.ndarray:
    """Van Loan integrals for stacks of (A_k, B_k, t_k)."""
    A_stack = _as_square_stack(A_stack)
    B_stack = _as_square_stack(B_stack, 'B')
    t_stack = np.asarray(t_stack, dtype=float)
    if A_stack.shape != B_stack.shape or t_stack.shape != A_stack.shape[:1]:
        raise DimensionMismatch("A, B and t stacks must agree in length and dimension")
    if np.any(t_stack < 0) or not np.all(np.isfinite(t_stack)):
        raise InputError("t must be finite and nonnegative")
    d = A_stack.shape[1]
    out = np.zeros_like(A_stack)
    if A_stack.shape[0] == 0:
        return out

    E = _scipy_expm(van_loan_block(A_stack, B_stack) * t_stack[:, None, None])
    _check_blocks(E, d)
    out[:] = E[:, :d, d:]
    out[t_stack == 0.0] = 0.0
    return out
