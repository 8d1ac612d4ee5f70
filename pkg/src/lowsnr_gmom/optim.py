"""BFGS with a strong-Wolfe line search and an Armijo backtracking fallback."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import line_search

__all__ = ["OptOptions", "OptResult", "GradientCheckError", "quasi_newton", "check_gradient"]


class GradientCheckError(ValueError):
    """Analytic gradient disagrees with finite differences of the objective."""


@dataclass
class OptOptions:
    gtol: float = 1e-8
    max_iter: int = 500
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 60
    verify: bool = False
    verify_rtol: float = 1e-4


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool
    message: str
    trace: list[float] = field(default_factory=list)


def check_gradient(fun: Callable, grad: Callable, x, step: float = 1e-6,
                   rtol: float = 1e-4) -> float:
    """Relative error between ``grad(x)`` and central differences of ``fun``.

    Raises :class:`GradientCheckError` when the error exceeds ``rtol``.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(grad(x), dtype=float)
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step * max(1.0, abs(x[i]))
        fd[i] = (fun(x + e) - fun(x - e)) / (2 * e[i])
    scale = max(np.linalg.norm(fd), np.linalg.norm(g), 1e-12)
    err = float(np.linalg.norm(g - fd) / scale)
    if err > rtol:
        raise GradientCheckError(f"gradient check failed: relative error {err:.3g}")
    return err


def _wolfe_step(fun, grad, x, p, f, g, f_prev, opts):
    """Strong-Wolfe step along ``p``; ``(None, None, None)`` when the search fails."""
    last = {}

    def cached_grad(z):
        gz = np.asarray(grad(z), dtype=float)
        last["x"], last["g"] = z.copy(), gz
        return gz

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        alpha, _, _, f_new, _, _ = line_search(fun, cached_grad, x, p, gfk=g, old_fval=f,
                                               old_old_fval=f_prev, c1=opts.c1, c2=0.9)
    if alpha is None or f_new is None or not np.isfinite(f_new) or f_new > f:
        return None, None, None
    x_new = x + alpha * p
    if "x" in last and np.array_equal(last["x"], x_new):
        g_new = last["g"]
    else:
        g_new = np.asarray(grad(x_new), dtype=float)
    return x_new, float(f_new), g_new


def _backtrack(alpha: float, f0: float, slope: float, f_alpha: float, shrink: float) -> float:
    """Minimiser of the quadratic through ``f0``, ``slope`` and ``f_alpha``, kept in ``[0.1, shrink] * alpha``."""
    if not np.isfinite(f_alpha):
        return alpha * shrink
    curv = f_alpha - f0 - alpha * slope
    trial = -slope * alpha**2 / (2.0 * curv) if curv > 0 else alpha * shrink
    return min(max(trial, 0.1 * alpha), shrink * alpha)


def quasi_newton(fun: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                 x0, opts: OptOptions | None = None) -> OptResult:
    """Minimise ``fun`` from ``x0`` with inverse-Hessian BFGS updates.

    Accepted iterates never increase the objective beyond rounding level
    (a step whose objective change is indistinguishable from zero is taken
    only if it reduces the gradient norm).  If the line search
    cannot make progress the best iterate is returned with
    ``converged=False``.
    """
    opts = opts or OptOptions()
    x = np.array(x0, dtype=float)
    if opts.verify:
        check_gradient(fun, grad, x, rtol=opts.verify_rtol)
    f = float(fun(x))
    g = np.asarray(grad(x), dtype=float)
    n = x.size
    H = np.eye(n)
    trace = [f]
    f_prev = None

    for it in range(opts.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= opts.gtol:
            return OptResult(x, f, g, gnorm, it, True, "gradient tolerance reached", trace)
        if it == opts.max_iter:
            break
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0:
            # lost descent; restart from steepest descent
            H = np.eye(n)
            p, slope = -g, -gnorm**2
        x_new, f_new, g_new = _wolfe_step(fun, grad, x, p, f, g, f_prev, opts)
        if x_new is None:
            alpha = 1.0
            flat_tol = 16 * np.finfo(float).eps * max(1.0, abs(f))
            g_new = None
            for _ in range(opts.max_backtracks):
                x_new = x + alpha * p
                f_new = float(fun(x_new))
                if np.isfinite(f_new) and f_new <= f + opts.c1 * alpha * slope:
                    break
                if np.isfinite(f_new) and abs(f_new - f) <= flat_tol:
                    # objective differences are at rounding level; judge by the gradient
                    g_try = np.asarray(grad(x_new), dtype=float)
                    if np.linalg.norm(g_try) < gnorm:
                        g_new = g_try
                        break
                alpha = _backtrack(alpha, f, slope, f_new, opts.shrink)
            else:
                return OptResult(x, f, g, gnorm, it, False, "line search failed", trace)
        if g_new is None:
            g_new = np.asarray(grad(x_new), dtype=float)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            Hy = H @ y
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + (rho**2 * float(y @ Hy) + rho) * np.outer(s, s))
        f_prev = f
        x, f, g = x_new, f_new, g_new
        trace.append(f)

    return OptResult(x, f, g, float(np.linalg.norm(g)), opts.max_iter, False,
                     "maximum iterations reached", trace)
