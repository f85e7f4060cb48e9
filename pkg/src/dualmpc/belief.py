"""Conjugate Bayesian estimation of mode probabilities and mode parameters.

The growing history of states and inputs is summarised exactly by one
Gaussian over the parameters of each mode plus a probability per mode,
because every update is conjugate. Updates are computed in moment (Kalman)
form, with the information matrix available as a derived quantity; this is
algebraically the information-form update and stays well defined when a
prior covariance is singular.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModeModel, ModelSet

_LOG_2PI = np.log(2.0 * np.pi)


class NumericalError(ArithmeticError):
    """Raised when an update meets non-finite or indefinite quantities."""


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def prior_of(cls, mode: ModeModel) -> "GaussianBelief":
        return cls(mode.prior_mean, mode.prior_cov)

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.cov)

    def information(self) -> np.ndarray:
        """Precision matrix; raises for a singular covariance."""
        return np.linalg.inv(self.cov)


@dataclass(frozen=True, eq=False)
class BeliefState:
    mode_probs: np.ndarray
    params: tuple

    @classmethod
    def prior(cls, models: ModelSet) -> "BeliefState":
        return cls(models.prior_probs, tuple(GaussianBelief.prior_of(m) for m in models.modes))

    @property
    def n_modes(self) -> int:
        return self.mode_probs.size

    def means(self) -> list:
        return [p.mean for p in self.params]

    def same_as(self, other: "BeliefState") -> bool:
        if not np.array_equal(self.mode_probs, other.mode_probs):
            return False
        return all(
            np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)
            for a, b in zip(self.params, other.params)
        )


@dataclass(frozen=True)
class CapConfig:
    """Lower bounds on mode probabilities and on parameter variances."""

    p_min: float = 0.0
    var_floor: tuple = ()

    def floor_for(self, mode_index: int, n_gamma: int) -> np.ndarray:
        if not self.var_floor:
            return np.zeros(n_gamma)
        f = self.var_floor[mode_index] if len(self.var_floor) > mode_index else self.var_floor[-1]
        return np.broadcast_to(np.asarray(f, dtype=float), (n_gamma,))

    def validate(self, n_modes: int) -> None:
        if self.p_min < 0 or self.p_min * n_modes >= 1.0:
            raise ValueError(f"p_min={self.p_min} infeasible for {n_modes} modes")


def _residual(mode: ModeModel, x, u, x_next):
    phi = np.asarray(mode.basis(x, u), dtype=float)
    r = np.asarray(x_next, dtype=float) - mode.drift(x, u)
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(r))):
        raise NumericalError("non-finite regressor or measurement")
    return phi, r


def _kalman(prior: GaussianBelief, mode: ModeModel, phi, r, with_loglik: bool):
    P = prior.cov
    informative = bool(np.any(P)) and bool(np.any(phi))
    if not informative and not with_loglik:
        return prior, None
    innov = r - phi @ prior.mean
    PH = P @ phi.T
    S = mode.noise_cov + phi @ PH
    try:
        c = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance not positive definite") from exc
    post = prior
    if informative:
        K = np.linalg.solve(c.T, np.linalg.solve(c, PH.T)).T
        IKH = np.eye(P.shape[0]) - K @ phi
        # Joseph form keeps the covariance symmetric PSD under rounding
        cov = IKH @ P @ IKH.T + K @ mode.noise_cov @ K.T
        post = GaussianBelief(prior.mean + K @ innov, 0.5 * (cov + cov.T))
    return post, (_gauss_logpdf(innov, c) if with_loglik else None)


def _gauss_logpdf(innov, chol):
    z = np.linalg.solve(chol, innov)
    return float(-0.5 * (z @ z) - np.log(np.diag(chol)).sum() - 0.5 * innov.size * _LOG_2PI)


def param_update(prior: GaussianBelief, mode: ModeModel, x, u, x_next) -> GaussianBelief:
    """Posterior over ``gamma`` after observing the transition ``x, u -> x_next``.

    Equivalent to the precision update
    ``Lambda' = Lambda + Phi^T W^-1 Phi`` with ``W = noise_cov``.
    """
    phi, r = _residual(mode, x, u, x_next)
    post, _ = _kalman(prior, mode, phi, r, with_loglik=False)
    return post


def log_marginal_likelihood(prior: GaussianBelief, mode: ModeModel, x, u, x_next) -> float:
    """Log of ``N(x_next; g + Phi mean, W + Phi cov Phi^T)``."""
    phi, r = _residual(mode, x, u, x_next)
    _, ll = _kalman(prior, mode, phi, r, with_loglik=True)
    return ll


def marginal_likelihood(prior: GaussianBelief, mode: ModeModel, x, u, x_next) -> float:
    return float(np.exp(log_marginal_likelihood(prior, mode, x, u, x_next)))


def mode_update_log(belief: BeliefState, log_likelihoods: Sequence[float]) -> BeliefState:
    """Bayes rule on mode probabilities with log-domain normalisation."""
    ll = np.asarray(log_likelihoods, dtype=float)
    with np.errstate(divide="ignore"):
        logp = np.log(belief.mode_probs) + ll
    if np.any(np.isnan(logp)) or not np.any(np.isfinite(logp)):
        raise NumericalError("no mode has positive posterior mass")
    logp = logp - logp.max()
    p = np.exp(logp)
    p = p / p.sum()
    return BeliefState(p, belief.params)


def mode_update(belief: BeliefState, likelihoods: Sequence[float]) -> BeliefState:
    """Bayes rule from linear-scale likelihoods (evaluated in the log domain)."""
    lik = np.asarray(likelihoods, dtype=float)
    if np.any(lik < 0):
        raise ValueError("likelihoods must be non-negative")
    with np.errstate(divide="ignore"):
        return mode_update_log(belief, np.log(lik))


def apply_caps(belief: BeliefState, caps: CapConfig) -> BeliefState:
    """Clamp mode probabilities to ``p_min`` and floor parameter variances.

    Clamped modes are pinned to ``p_min``; the remaining mass is shared among
    the other modes in proportion to their current probabilities, repeating
    until no further mode falls below the bound.
    """
    p = belief.mode_probs
    if caps.p_min > 0 and np.any(p < caps.p_min):
        clamped = np.zeros(p.size, dtype=bool)
        out = p.copy()
        while True:
            low = (out < caps.p_min) & ~clamped
            if not low.any():
                break
            clamped |= low
            free = ~clamped
            out[clamped] = caps.p_min
            out[free] = p[free] / p[free].sum() * (1.0 - caps.p_min * clamped.sum())
        p = out
    params = belief.params
    if caps.var_floor:
        new = []
        floored = False
        for i, g in enumerate(params):
            floor = caps.floor_for(i, g.mean.size)
            low = np.flatnonzero(np.diag(g.cov) < floor)
            if low.size:
                cov = g.cov.copy()
                cov[low, low] = floor[low]
                g = GaussianBelief(g.mean, cov)
                floored = True
            new.append(g)
        if floored:
            params = tuple(new)
    if p is belief.mode_probs and params is belief.params:
        return belief
    return BeliefState(p, params)


def full_update(belief: BeliefState, models: ModelSet, x, u, x_next, caps: CapConfig | None = None) -> BeliefState:
    """Parameter posteriors, mode probabilities and caps for one transition."""
    posts = []
    logliks = np.zeros(models.n_modes)
    need_ll = models.n_modes > 1
    for i, (mode, prior) in enumerate(zip(models.modes, belief.params)):
        phi, r = _residual(mode, x, u, x_next)
        post, ll = _kalman(prior, mode, phi, r, with_loglik=need_ll)
        posts.append(post)
        if need_ll:
            logliks[i] = ll
    new = BeliefState(belief.mode_probs, tuple(posts))
    if need_ll:
        new = mode_update_log(new, logliks)
    if caps is not None:
        new = apply_caps(new, caps)
    return new
