"""Dense BFGS with a strong-Wolfe line search, and steepest descent with backtracking.

Objectives are callables returning ``(f, g)``; the extra payload some callers
need (energies, models) is passed through ``info`` attributes on the
optimizer rather than recomputed.
"""

from __future__ import annotations

import math

import numpy as np


class LineSearchFailure(RuntimeError):
    pass


def wolfe_search(fun, x, f0, g0, p, alpha0=1.0, c1=1e-4, c2=0.9, max_evals=25):
    """Strong-Wolfe step along ``p`` (bracketing then zoom by bisection-safeguarded cubic steps).

    Returns ``(alpha, f, g, evals)``.
    """
    d0 = g0 @ p
    if d0 >= 0:
        raise LineSearchFailure("not a descent direction")
    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = fun(x + a * p)
        return f, g, g @ p

    def zoom(lo, flo, dlo, hi, fhi, dhi):
        while evals < max_evals:
            a = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            f, g, d = phi(a)
            if not math.isfinite(f) or f > f0 + c1 * a * d0 or f >= flo:
                hi, fhi, dhi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, g
                if d * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo = a, f, d
            if abs(hi - lo) < 1e-14 * max(1.0, abs(lo)):
                break
        if lo > 0 and flo < f0 + c1 * lo * d0:
            f, g, _ = phi(lo)
            return lo, f, g
        raise LineSearchFailure("zoom did not converge")

    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = alpha0
    for i in range(max_evals):
        f, g, d = phi(a)
        if not math.isfinite(f) or f > f0 + c1 * a * d0 or (i > 0 and f >= f_prev):
            a, f, g = zoom(a_prev, f_prev, d_prev, a, f if math.isfinite(f) else math.inf, d if math.isfinite(d) else 0.0)
            return a, f, g, evals
        if abs(d) <= -c2 * d0:
            return a, f, g, evals
        if d >= 0:
            a, f, g = zoom(a, f, d, a_prev, f_prev, d_prev)
            return a, f, g, evals
        a_prev, f_prev, d_prev = a, f, d
        a = 2.0 * a
    raise LineSearchFailure("no acceptable step found")


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolant on [a, b], safeguarded toward the interval interior."""
    lo, hi = min(a, b), max(a, b)
    if math.isfinite(fb) and math.isfinite(db):
        d1 = da + db - 3 * (fa - fb) / (a - b)
        rad = d1 * d1 - da * db
        if rad >= 0:
            d2 = math.copysign(math.sqrt(rad), b - a)
            den = db - da + 2 * d2
            if den != 0:
                t = b - (b - a) * (db + d2 - d1) / den
                margin = 0.1 * (hi - lo)
                if lo + margin <= t <= hi - margin:
                    return t
    return 0.5 * (lo + hi)


class BFGS:
    """Dense inverse-Hessian BFGS.

    ``step()`` performs one iteration and returns ``False`` when no further
    progress is possible (tiny gradient or line-search failure). The
    objective may be swapped mid-run with :meth:`reset_objective`; the
    Hessian approximation is kept.
    """

    def __init__(self, fun, x0, gtol=1e-10):
        self.fun = fun
        self.x = np.array(x0, dtype=float)
        self.f, self.g = fun(self.x)
        self.H = None
        self.gtol = gtol
        self.n_evals = 1
        self.n_iter = 0

    def reset_objective(self, fun):
        self.fun = fun
        self.f, self.g = fun(self.x)
        self.n_evals += 1

    def step(self) -> bool:
        if not np.isfinite(self.g).all() or np.linalg.norm(self.g) < self.gtol:
            return False
        if self.H is None:
            p = -self.g
            alpha0 = min(1.0, 1.0 / np.abs(self.g).sum())
        else:
            p = -self.H @ self.g
            alpha0 = 1.0
        try:
            alpha, f, g, evals = wolfe_search(self.fun, self.x, self.f, self.g, p, alpha0)
        except LineSearchFailure:
            return False
        self.n_evals += evals
        s = alpha * p
        y = g - self.g
        sy = s @ y
        if self.H is None:
            scale = sy / (y @ y) if sy > 0 else 1.0
            self.H = np.eye(self.x.size) * scale
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            Hy = self.H @ y
            self.H = self.H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * (y @ Hy) + rho) * np.outer(s, s)
        self.x = self.x + s
        self.f, self.g = f, g
        self.n_iter += 1
        return True


class GradientDescent:
    """Steepest descent with Armijo backtracking and a step size carried between iterations."""

    def __init__(self, fun, x0, step=1.0, shrink=0.5, grow=1.5, c1=1e-4, max_backtracks=30):
        self.fun = fun
        self.x = np.array(x0, dtype=float)
        self.f, self.g = fun(self.x)
        self.t = step
        self.shrink, self.grow, self.c1 = shrink, grow, c1
        self.max_backtracks = max_backtracks
        self.n_evals = 1
        self.n_iter = 0

    def reset_objective(self, fun):
        self.fun = fun
        self.f, self.g = fun(self.x)

    def step(self) -> bool:
        gg = self.g @ self.g
        if not np.isfinite(gg) or gg == 0:
            return False
        t = self.t
        for _ in range(self.max_backtracks):
            x = self.x - t * self.g
            try:
                f, g = self.fun(x)
            except ArithmeticError:
                f, g = math.inf, None
            self.n_evals += 1
            if math.isfinite(f) and f <= self.f - self.c1 * t * gg:
                self.x, self.f, self.g = x, f, g
                self.t = t * self.grow
                self.n_iter += 1
                return True
            t *= self.shrink
        return False
