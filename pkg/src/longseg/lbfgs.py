"""Limited-memory BFGS minimizer with Armijo backtracking.

The objective may return ``+inf`` (or ``None``) for infeasible points, e.g. a
mesh with an inverted tetrahedron; the line search simply backtracks past
them.  The returned point never has a larger objective than the start.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    converged: bool
    line_search_failed: bool = False
    history: list = field(default_factory=list)


def _two_loop(g, s_list, y_list):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append((rho, a))
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), (rho, a) in zip(zip(s_list, y_list), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def minimize(
    fun,
    x0,
    memory=10,
    max_iters=100,
    gtol=1e-6,
    ftol=1e-10,
    c1=1e-4,
    max_backtracks=40,
    max_step_norm=None,
):
    """Minimize ``fun(x) -> (f, grad)``.

    Stops when ``max|grad| <= gtol * max(1, |f|)``, when an iteration lowers
    ``f`` by less than ``ftol * max(1, |f|)``, or after ``max_iters``.
    ``max_step_norm`` caps the infinity norm of the first trial step of each
    line search.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    n_eval = 1
    if f is None or not np.isfinite(f):
        raise ValueError("starting point is infeasible")
    s_list, y_list = [], []
    history = [f]
    converged = False
    failed = False
    it = 0
    for it in range(1, max_iters + 1):
        scale = max(1.0, abs(f))
        if np.max(np.abs(g), initial=0.0) <= gtol * scale:
            converged = True
            it -= 1
            break
        d = _two_loop(g, s_list, y_list)
        slope = np.dot(g, d)
        if slope >= 0:
            # not a descent direction: drop curvature memory and use steepest descent
            s_list, y_list = [], []
            d = -g
            slope = -np.dot(g, g)
        step = 1.0
        if not s_list:
            step = min(1.0, 1.0 / max(np.max(np.abs(d)), 1e-300))
        if max_step_norm is not None:
            dn = np.max(np.abs(d)) * step
            if dn > max_step_norm:
                step *= max_step_norm / dn
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            n_eval += 1
            if f_new is not None and np.isfinite(f_new) and f_new <= f + c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            failed = True
            logger.debug("line search failed at iteration %d (f=%g)", it, f)
            break
        s = x_new - x
        y = g_new - g
        sy = np.dot(s, y)
        if sy > 1e-10 * np.dot(y, y) and sy > 0:
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        decrease = f - f_new
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if decrease <= ftol * max(1.0, abs(f)):
            converged = True
            break
    return LBFGSResult(x, f, g, it, n_eval, converged, failed, history)
