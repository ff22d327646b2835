"""Levenberg-Marquardt (damped Gauss-Newton) for small dense problems."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    converged: bool
    n_iter: int
    message: str


def levenberg_marquardt(
    fun: Callable[[np.ndarray], np.ndarray],
    jac: Callable[[np.ndarray], np.ndarray],
    x0,
    *,
    max_iter: int = 500,
    ftol: float = 1e-14,
    xtol: float = 1e-14,
    gtol: float = 1e-14,
    damping: float = 1e-3,
) -> LMResult:
    """Minimize ``0.5 * ||fun(x)||^2``.

    Steps solve ``(J^T J + lam * diag(J^T J)) dx = -J^T r``. Accepted steps
    shrink ``lam`` by 3, rejected ones grow it by 4. Non-finite trial
    residuals count as rejections, so poles in the model are stepped around.
    """
    x = np.array(x0, dtype=np.float64)
    r = fun(x)
    if not np.all(np.isfinite(r)):
        return LMResult(x, np.inf, False, 0, "non-finite residuals at start")
    cost = 0.5 * float(r @ r)
    lam = damping
    for it in range(1, max_iter + 1):
        J = jac(x)
        g = J.T @ r
        if not np.all(np.isfinite(g)):
            return LMResult(x, cost, False, it, "non-finite gradient")
        if np.abs(g).max(initial=0.0) <= gtol * max(1.0, cost):
            return LMResult(x, cost, True, it, "gradient tolerance")
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-12)
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                xn = x + step
                rn = fun(xn)
                if np.all(np.isfinite(rn)):
                    cn = 0.5 * float(rn @ rn)
                    if cn < cost:
                        break
            lam *= 4.0
            if lam > 1e16:
                return LMResult(x, cost, True, it, "no descent direction (local minimum)")
        small_f = cost - cn <= ftol * cost
        small_x = np.linalg.norm(step) <= xtol * (np.linalg.norm(x) + xtol)
        x, r, cost = xn, rn, cn
        lam = max(lam / 3.0, 1e-15)
        if small_f or small_x:
            return LMResult(x, cost, True, it, "cost tolerance" if small_f else "step tolerance")
    return LMResult(x, cost, False, max_iter, "iteration limit")
