"""Box-constrained minimisation by projected L-BFGS.

Each iteration fixes the variables held at a bound by the current gradient,
computes a two-loop L-BFGS direction on the remaining free variables and
backtracks along the projected path ``P(x + a d)`` until the Armijo
condition holds. The curvature memory is cleared whenever the set of bound
variables changes.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class ObjectiveFailure(RuntimeError):
    """The objective could not be evaluated at the starting point."""


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 200
    grad_tol: float = 1e-6
    step_init: float = 1.0
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    fd_step: float = 1e-6
    memory: int = 10
    ftol: float = 0.0
    time_budget: Optional[float] = None
    failure_value: float = 1e12
    reset_on_active_change: bool = True

    def __post_init__(self):
        if not 0.0 < self.armijo_c < 0.5:
            raise ValueError("armijo_c must lie in (0, 0.5)")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        for name in ("max_iters", "grad_tol", "step_init", "fd_step", "memory"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolveReport:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    kkt_residual: float
    n_evals: int = 0
    message: str = ""
    history: list = field(default_factory=list, repr=False)


def project(u, lower, upper) -> np.ndarray:
    """Elementwise clamp onto ``[lower, upper]``."""
    return np.minimum(np.maximum(np.asarray(u, dtype=float), lower), upper)


def projected_gradient(x, g, lower, upper) -> np.ndarray:
    """Gradient with the components that push outward at an active bound removed.

    Unlike ``x - P(x - g)`` this is not capped by the box width, so it stays a
    meaningful stationarity measure when gradients are large.
    """
    pg = np.array(g, dtype=float)
    at_lo = x <= lower
    at_hi = x >= upper
    pg[at_lo] = np.minimum(pg[at_lo], 0.0)
    pg[at_hi] = np.maximum(pg[at_hi], 0.0)
    return pg


def fd_gradient(fun: Callable, x, f0, lower, upper, step: float) -> np.ndarray:
    """Central differences that never leave the box (one-sided at bounds)."""
    g = np.empty_like(x)
    for i in range(x.size):
        h = step * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        up = x[i] + h <= upper[i]
        down = x[i] - h >= lower[i]
        if up and down:
            xp[i] += h
            xm[i] -= h
            g[i] = (fun(xp) - fun(xm)) / (2.0 * h)
        elif up:
            xp[i] += h
            g[i] = (fun(xp) - f0) / h
        else:
            xm[i] -= h
            g[i] = (f0 - fun(xm)) / h
    return g


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def minimize(
    fun: Callable,
    x0,
    bounds,
    cfg: SolverConfig = SolverConfig(),
    jac: Optional[Callable] = None,
    value_and_grad: Optional[Callable] = None,
) -> SolveReport:
    """Minimise ``fun`` over the box ``bounds = (lower, upper)``.

    Gradients come from ``value_and_grad`` (returns ``(f, g)``), else from
    ``jac``, else from box-respecting central differences of ``fun``.
    Convergence is declared when the projected gradient satisfies
    ``|pg|_inf <= grad_tol * (1 + |f|)``.
    """
    lower = np.asarray(bounds[0], dtype=float)
    upper = np.asarray(bounds[1], dtype=float)
    x = project(np.asarray(x0, dtype=float), lower, upper)
    lower = np.broadcast_to(lower, x.shape)
    upper = np.broadcast_to(upper, x.shape)
    n_evals = 0
    started = time.perf_counter()

    def f_only(z):
        nonlocal n_evals
        n_evals += 1
        return float(fun(z))

    def f_and_g(z):
        nonlocal n_evals
        if value_and_grad is not None:
            n_evals += 1
            f, g = value_and_grad(z)
            return float(f), np.asarray(g, dtype=float)
        f = f_only(z)
        if jac is not None:
            return f, np.asarray(jac(z), dtype=float)
        return f, fd_gradient(f_only, z, f, lower, upper, cfg.fd_step)

    f, g = f_and_g(x)
    if not np.isfinite(f) or f >= cfg.failure_value:
        raise ObjectiveFailure("objective not finite at the initial plan")

    pairs: deque = deque(maxlen=cfg.memory)
    prev_bound = None
    history = [f]
    converged = False
    message = "max_iters reached"
    for _ in range(cfg.max_iters):
        pg = projected_gradient(x, g, lower, upper)
        kkt = float(np.max(np.abs(pg), initial=0.0))
        if kkt <= cfg.grad_tol * (1.0 + abs(f)):
            converged = True
            message = "projected gradient below tolerance"
            break
        if cfg.time_budget is not None and time.perf_counter() - started > cfg.time_budget:
            message = "time budget exhausted"
            break

        bound = ((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0))
        if cfg.reset_on_active_change and (prev_bound is None or not np.array_equal(bound, prev_bound)):
            pairs.clear()
        prev_bound = bound
        free = ~bound

        gf = np.where(free, g, 0.0)
        d = np.zeros_like(x)
        if pairs:
            sub = [(s[free], y[free]) for s, y in pairs]
            d[free] = _two_loop(gf[free], [(s, y, 1.0 / (s @ y)) for s, y in sub if s @ y > 0])
        if not pairs or not gf @ d < 0:
            scale = cfg.step_init / max(1.0, float(np.max(np.abs(gf))))
            d = -gf * scale

        step = 1.0
        accepted = False
        g_new = None
        while step > 1e-20:
            x_new = project(x + step * d, lower, upper)
            if np.array_equal(x_new, x):
                break
            # the full step is usually accepted; fetch its gradient eagerly when cheap
            if step == 1.0 and value_and_grad is not None:
                f_new, g_new = f_and_g(x_new)
            else:
                f_new, g_new = f_only(x_new), None
            if f_new < cfg.failure_value and f_new <= f + cfg.armijo_c * (g @ (x_new - x)):
                accepted = True
                break
            step *= cfg.backtrack_factor
        if not accepted:
            if pairs:
                pairs.clear()
                prev_bound = None
                continue
            message = "line search failed"
            break

        if g_new is None:
            f_new, g_new = f_and_g(x_new)
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            pairs.append((s, y))
        decrease = f - f_new
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if cfg.ftol > 0 and decrease <= cfg.ftol * max(1.0, abs(f)):
            message = "relative decrease below ftol"
            break

    pg = projected_gradient(x, g, lower, upper)
    kkt = float(np.max(np.abs(pg), initial=0.0))
    if not converged and kkt <= cfg.grad_tol * (1.0 + abs(f)):
        converged = True
    return SolveReport(x, f, len(history) - 1, converged, kkt, n_evals, message, history)


def solve_box_qp(H, b, lower, upper, x0=None, tol: float = 1e-12, max_iters: int = 100) -> np.ndarray:
    """Minimise ``x^T H x / 2 + b^T x`` over a box for symmetric positive definite ``H``.

    Projected Newton: the Newton step is taken on the variables not held at a
    bound by the gradient, followed by a backtracking search along the
    projection arc; a projected Cauchy step is the fallback when that search
    stalls. Terminates on the exact minimiser of the identified face.
    """
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), b.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), b.shape)
    x = project(np.zeros_like(b) if x0 is None else x0, lower, upper)

    def f(z):
        return float(z @ (0.5 * (H @ z) + b))

    scale = tol * max(1.0, float(np.max(np.abs(b), initial=0.0)))
    for _ in range(max_iters):
        g = H @ x + b
        if np.max(np.abs(projected_gradient(x, g, lower, upper)), initial=0.0) <= scale:
            break
        held = ((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0))
        free = ~held
        d = np.zeros_like(x)
        Hf = H[np.ix_(free, free)]
        d[free] = -np.linalg.solve(Hf, g[free])
        fx = f(x)
        step = 1.0
        x_new = None
        while step > 1e-12:
            trial = project(x + step * d, lower, upper)
            if f(trial) <= fx + 1e-4 * (g @ (trial - x)) and not np.array_equal(trial, x):
                x_new = trial
                break
            step *= 0.5
        if x_new is None:
            gf = np.where(free, g, 0.0)
            curv = gf @ H @ gf
            if curv <= 0:
                break
            x_new = project(x - (gf @ gf) / curv * gf, lower, upper)
            if f(x_new) >= fx:
                break
        x = x_new
    return x
