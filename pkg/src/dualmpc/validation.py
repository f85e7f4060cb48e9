"""Quick self-checks against closed-form oracles, run by ``dualmpc validate``.

These are a fast subset of the repository test suite that needs nothing but
the installed package. Each check returns the worst deviation it measured.
"""

from __future__ import annotations

import time
from fractions import Fraction
from typing import Callable

import numpy as np

from .belief import BeliefState, CapConfig, GaussianBelief, apply_caps, mode_update, param_update
from .model import ModelSet, affine_mode, input_gain_mode
from .objective import taylor_propagate
from .optimizer import SolverConfig, minimize
from .tree import build_topology


def _scalar_posterior() -> float:
    mode = input_gain_mode("m", [[1.0]], [[1.0]], prior_mean=[0.4], prior_cov=[[0.01]], noise_cov=[[0.09]])
    post = param_update(GaussianBelief(mode.prior_mean, mode.prior_cov), mode, np.zeros(1), np.array([0.2]), np.array([0.06]))
    var = 1.0 / (100.0 + 0.04 / 0.09)
    mean = var * (100.0 * 0.4 + 0.2 * 0.06 / 0.09)
    return max(abs(post.cov[0, 0] - var), abs(post.mean[0] - mean))


def _mode_fractions() -> float:
    prior = [Fraction(1, 10), Fraction(2, 10), Fraction(3, 10), Fraction(4, 10)]
    lik = [Fraction(3), Fraction(1, 2), Fraction(7, 4), Fraction(1, 8)]
    z = sum(p * q for p, q in zip(prior, lik))
    exact = np.array([float(p * q / z) for p, q in zip(prior, lik)])
    b = BeliefState(np.array([float(p) for p in prior]), ())
    return float(np.max(np.abs(mode_update(b, [float(v) for v in lik]).mode_probs - exact)))


def _caps() -> float:
    b = apply_caps(BeliefState(np.array([0.01, 0.99]), ()), CapConfig(0.05))
    return float(np.max(np.abs(b.mode_probs - [0.05, 0.95])))


def _topology() -> float:
    t = build_topology(2, 2, 2, 5)
    return float(abs(np.array(t.counts) - [1, 4, 16]).max())


def _taylor_linear() -> float:
    rng = np.random.default_rng(7)
    n = 3
    A = rng.normal(size=(n, n)) * 0.4
    b = rng.normal(size=n)
    W = np.diag(rng.uniform(0.1, 0.5, n))
    mode = affine_mode("lin", A, np.zeros((n, 1)), Gu=[b.reshape(n, 1)], prior_mean=[0.3], prior_cov=[[0.2]], noise_cov=W)
    u = np.ones((20, 1))
    out = taylor_propagate(np.zeros(n), mode, np.array([0.3]), np.array([[0.2]]), u)
    # exact: x_k = sum_i A^(k-1-i) b gamma + noise, so Cov = s s^T v + sum A^i W A^iT
    s = np.zeros(n)
    P = np.zeros((n, n))
    worst = 0.0
    for k in range(20):
        s = A @ s + b
        P = A @ P @ A.T + W
        worst = max(worst, float(np.max(np.abs(out[k].state_cov(n) - (0.2 * np.outer(s, s) + P)))))
    return worst


def _box_qp() -> float:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 12))
        M = rng.normal(size=(n, n))
        H = M @ M.T + n * np.eye(n)
        x_star = rng.uniform(-1, 1, n)
        lam = np.where(x_star > 0.5, -rng.uniform(0.1, 1, n), np.where(x_star < -0.5, rng.uniform(0.1, 1, n), 0.0))
        x_star = np.clip(x_star, -0.5, 0.5)
        c = lam - H @ x_star  # gradient H x* + c = lam, outward at active bounds

        def f(x):
            return 0.5 * x @ H @ x + c @ x

        rep = minimize(f, np.zeros(n), (-0.5 * np.ones(n), 0.5 * np.ones(n)), SolverConfig(grad_tol=1e-10), jac=lambda x: H @ x + c)
        worst = max(worst, abs(rep.fun - f(x_star)))
    return worst


def _mode_sum_error() -> float:
    try:
        m1 = input_gain_mode("a", [[1.0]], [[1.0]], prior_mean=[1.0], prior_cov=[[0.1]], noise_cov=[[0.1]], prior_prob=0.5)
        m2 = input_gain_mode("b", [[1.0]], [[1.0]], prior_mean=[1.0], prior_cov=[[0.1]], noise_cov=[[0.1]], prior_prob=0.4)
        ModelSet((m1, m2), 1, 1, -1.0, 1.0)
    except ValueError as exc:
        return 0.0 if "mode probabilities sum to 0.9" in str(exc) else 1.0
    return 1.0


CHECKS: tuple[tuple[str, Callable[[], float], float], ...] = (
    ("scalar conjugate posterior", _scalar_posterior, 1e-12),
    ("mode update vs exact fractions", _mode_fractions, 1e-12),
    ("probability cap renormalisation", _caps, 1e-15),
    ("tree node counts", _topology, 0.0),
    ("moment propagation vs exact linear-Gaussian", _taylor_linear, 1e-12),
    ("box QP optimum", _box_qp, 1e-8),
    ("mode probability validation", _mode_sum_error, 0.0),
)


def run_checks(verbose: bool = True) -> bool:
    ok = True
    for name, fn, tol in CHECKS:
        t0 = time.perf_counter()
        err = fn()
        passed = err <= tol
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}: deviation {err:.3g} (tol {tol:g}, {time.perf_counter() - t0:.2f}s)")
    return ok
