"""Numeric rank and damped Newton-type solvers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .expr import FlatDTError, SingularEvaluation

RANK_RTOL = 1e-8
MIN_DAMPING = 2.0**-20


class ConvergenceError(FlatDTError):
    pass


def numeric_rank(a: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank from a column-pivoted QR factorization.

    Rows are first scaled to unit max-norm (rank is invariant under row
    scaling, and near-singular parameterizations produce rows of wildly
    different size).  Diagonal entries of R below ``rtol * |R[0, 0]|`` count
    as zero.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return 0
    scale = np.max(np.abs(a), axis=1)
    a = a[scale > 0] / scale[scale > 0, None]
    if a.size == 0:
        return 0
    r = scipy.linalg.qr(a, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(r))
    if d.size == 0 or d[0] == 0.0:
        return 0
    return int(np.sum(d > rtol * d[0]))


@dataclass
class SolveResult:
    x: np.ndarray
    residual: float
    iterations: int


ResidualJacobian = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def _safe_cost(fun: ResidualJacobian, x: np.ndarray) -> tuple[float, np.ndarray | None, np.ndarray | None]:
    try:
        r, j = fun(x)
    except SingularEvaluation:
        return np.inf, None, None
    if not np.all(np.isfinite(r)):
        return np.inf, None, None
    return 0.5 * float(r @ r), r, j


def damped_newton(
    fun: ResidualJacobian,
    x0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> SolveResult:
    """Solve the square system ``r(x) = 0`` by Newton with Armijo backtracking.

    ``fun`` returns the residual and its Jacobian.  The step length is halved
    until the squared residual decreases sufficiently; it never drops below
    ``2**-20``.
    """
    x = np.array(x0, dtype=float)
    cost, r, j = _safe_cost(fun, x)
    if r is None:
        raise ConvergenceError("residual is singular at the starting point")
    for it in range(max_iter + 1):
        res = float(np.max(np.abs(r))) if r.size else 0.0
        if res <= tol:
            return SolveResult(x, res, it)
        if it == max_iter:
            break
        try:
            step = np.linalg.solve(j, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(j, -r, rcond=None)[0]
        t = 1.0
        while t >= MIN_DAMPING:
            x_new = x + t * step
            cost_new, r_new, j_new = _safe_cost(fun, x_new)
            if r_new is not None and cost_new <= (1.0 - 1e-4 * t) * cost:
                break
            t *= 0.5
        else:
            # tiny residuals can stall on rounding; accept a full step once
            x_new = x + step
            cost_new, r_new, j_new = _safe_cost(fun, x_new)
            if r_new is None or cost_new > cost:
                raise ConvergenceError(
                    f"damped Newton stalled at residual {res:.3e} after {it} iterations"
                )
        x, cost, r, j = x_new, cost_new, r_new, j_new
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations (residual {res:.3e})")


def gauss_newton(
    fun: ResidualJacobian,
    x0: np.ndarray,
    max_iter: int = 200,
    step_tol: float = 1e-13,
    cost_rtol: float = 1e-15,
) -> SolveResult:
    """Minimize ``0.5 |r(x)|^2`` by damped Gauss-Newton.

    Returns when the step becomes negligible or the cost stops decreasing;
    ``residual`` in the result is the final cost.
    """
    x = np.array(x0, dtype=float)
    cost, r, j = _safe_cost(fun, x)
    if r is None:
        raise ConvergenceError("residual is singular at the starting point")
    for it in range(max_iter):
        if cost == 0.0:
            return SolveResult(x, cost, it)
        step = np.linalg.lstsq(j, -r, rcond=None)[0]
        if np.max(np.abs(step)) <= step_tol * (1.0 + np.max(np.abs(x))):
            return SolveResult(x, cost, it)
        t = 1.0
        grad_dot = float((j.T @ r) @ step)
        while t >= MIN_DAMPING:
            x_new = x + t * step
            cost_new, r_new, j_new = _safe_cost(fun, x_new)
            if r_new is not None and cost_new <= cost + 1e-4 * t * grad_dot:
                break
            t *= 0.5
        else:
            return SolveResult(x, cost, it)
        decrease = cost - cost_new
        x, cost, r, j = x_new, cost_new, r_new, j_new
        if decrease <= cost_rtol * max(cost, 1e-300):
            return SolveResult(x, cost, it + 1)
    raise ConvergenceError(f"Gauss-Newton did not converge in {max_iter} iterations")
