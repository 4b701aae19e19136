"""Dense primal active-set solver for ``min 0.5 x'Hx + g'x  s.t.  x <= upper``.

Only upper bounds are needed here (the constraint set of the negative-means
alternative is ``mu_l <= -eps``). ``H`` must be symmetric positive definite.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from scorecombine.errors import NumericError

__all__ = ["kkt_residual", "solve_upper_bounded_qp"]


def kkt_residual(H: np.ndarray, g: np.ndarray, upper: np.ndarray, x: np.ndarray) -> float:
    """Natural residual ``||x - min(upper, x - grad)||_inf``; zero exactly at the KKT point."""
    grad = H @ x + g
    return float(np.max(np.abs(x - np.minimum(upper, x - grad)), initial=0.0))


def solve_upper_bounded_qp(
    H: np.ndarray,
    g: np.ndarray,
    upper: np.ndarray,
    x0: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int | None = None,
) -> np.ndarray:
    """Minimize ``0.5 x'Hx + g'x`` subject to ``x <= upper``.

    Starts from ``min(x0, upper)`` with every bound that is hit placed in the
    working set. Each iteration either moves to the minimizer on the current
    free set (stopping at the first blocking bound) or, if already there,
    releases the bound with the most negative multiplier.

    Raises:
        NumericError: KKT residual above ``tol`` after ``max_iter`` iterations
            (default ``10 * m``).
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    upper = np.asarray(upper, dtype=float)
    m = g.shape[0]
    if max_iter is None:
        max_iter = 10 * m
    x = np.minimum(upper, np.zeros(m) if x0 is None else np.asarray(x0, dtype=float))
    working = x >= upper

    for _ in range(max_iter):
        grad = H @ x + g
        free = ~working
        step = np.zeros(m)
        if free.any():
            H_ff = H[np.ix_(free, free)]
            step[free] = -linalg.solve(H_ff, grad[free], assume_a="pos")
        if np.max(np.abs(step), initial=0.0) <= 1e-13 * (1.0 + np.max(np.abs(x))):
            multipliers = -grad
            if not working.any() or multipliers[working].min() >= -tol:
                return x
            idx = np.flatnonzero(working)
            working[idx[np.argmin(multipliers[idx])]] = False
            continue
        rising = free & (step > 0)
        alpha, blocking = 1.0, -1
        if rising.any():
            idx = np.flatnonzero(rising)
            ratios = (upper[idx] - x[idx]) / step[idx]
            k = int(np.argmin(ratios))
            if ratios[k] < 1.0:
                alpha, blocking = float(ratios[k]), int(idx[k])
        x = x + alpha * step
        if blocking >= 0:
            x[blocking] = upper[blocking]
            working[blocking] = True
        x = np.minimum(x, upper)

    residual = kkt_residual(H, g, upper, x)
    if residual <= tol:
        return x
    raise NumericError(
        f"active-set QP did not converge in {max_iter} iterations (KKT residual {residual:.3g})",
        residual,
    )
