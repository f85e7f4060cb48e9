"""Multi-mode dynamics ``x+ = g(x, u) + Phi(x, u) gamma + w``.

Each operating mode carries a regressor matrix ``Phi`` (the basis), a known
drift ``g``, a Gaussian prior over its parameters and additive Gaussian noise.
Modes whose drift and basis are linear in ``(x, u)`` carry an
:class:`AffineStructure`, which lets the objective use the batched rollout
kernels instead of calling back into Python per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg


class ConfigurationError(ValueError):
    """Raised for inconsistent model, cost or scenario data."""


def _frozen(a, ndim=None, name="array") -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ConfigurationError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def check_symmetric_psd(name: str, M: np.ndarray, strict: bool = False, tol: float = 1e-12) -> None:
    """Raise :class:`ConfigurationError` unless ``M`` is symmetric PSD (PD if ``strict``)."""
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ConfigurationError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ConfigurationError(f"{name} has non-finite entries")
    if np.max(np.abs(M - M.T), initial=0.0) > tol:
        raise ConfigurationError(f"{name} not symmetric")
    eig = np.linalg.eigvalsh(M) if M.size else np.zeros(0)
    if strict and (eig.size == 0 or eig.min() <= 0.0):
        raise ConfigurationError(f"{name} not positive definite")
    if not strict and eig.size and eig.min() < -tol * max(1.0, abs(eig).max()):
        raise ConfigurationError(f"{name} not positive semidefinite")


@dataclass(frozen=True)
class AffineStructure:
    """``g = A x + B u`` and ``Phi[:, i] = Gx[i] x + Gu[i] u``."""

    A: np.ndarray
    B: np.ndarray
    Gx: np.ndarray  # (n_gamma, n_x, n_x)
    Gu: np.ndarray  # (n_gamma, n_x, n_u)

    def effective(self, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """State and input matrices of ``x+ = g + Phi gamma`` at fixed ``gamma``."""
        gamma = np.asarray(gamma, dtype=float)
        A = self.A + np.tensordot(gamma, self.Gx, axes=1)
        B = self.B + np.tensordot(gamma, self.Gu, axes=1)
        return A, B


@dataclass(frozen=True, eq=False)
class ModeModel:
    """One operating mode.

    Attributes:
        name: identifier used in logs.
        basis: ``(x, u) -> Phi`` with shape ``(n_x, n_gamma)``.
        drift: ``(x, u) -> g`` with shape ``(n_x,)``.
        prior_mean, prior_cov: Gaussian prior over the mode parameters.
        noise_cov: additive process-noise covariance.
        prior_prob: prior probability that this mode is active.
        state_jacobian: optional ``(x, u, gamma) -> d(g + Phi gamma)/dx``;
            central differences are used when absent.
        input_jacobian: optional ``(x, u, gamma) -> d(g + Phi gamma)/du``.
        affine: set when drift and basis are linear in ``(x, u)``.
    """

    name: str
    basis: Callable[[np.ndarray, np.ndarray], np.ndarray]
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    noise_cov: np.ndarray
    prior_prob: float
    state_jacobian: Optional[Callable] = None
    input_jacobian: Optional[Callable] = None
    affine: Optional[AffineStructure] = None
    _noise_factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = _frozen(self.prior_mean, 1, f"{self.name}.prior_mean")
        cov = _frozen(self.prior_cov, 2, f"{self.name}.prior_cov")
        noise = _frozen(self.noise_cov, 2, f"{self.name}.noise_cov")
        if cov.shape != (mean.size, mean.size):
            raise ConfigurationError(f"{self.name}.prior_cov shape {cov.shape} does not match prior_mean")
        check_symmetric_psd(f"{self.name}.prior_cov", cov)
        # PSD only: a zero noise covariance is a legitimate deterministic limit.
        check_symmetric_psd(f"{self.name}.noise_cov", noise)
        p = float(self.prior_prob)
        if not 0.0 < p <= 1.0:
            raise ConfigurationError(f"{self.name}.prior_prob must lie in (0, 1], got {p}")
        object.__setattr__(self, "prior_mean", mean)
        object.__setattr__(self, "prior_cov", cov)
        object.__setattr__(self, "noise_cov", noise)
        object.__setattr__(self, "prior_prob", p)
        object.__setattr__(self, "_noise_factor", _frozen(psd_sqrt(noise), 2))

    @property
    def n_gamma(self) -> int:
        return self.prior_mean.size

    @property
    def noise_factor(self) -> np.ndarray:
        """Lower factor ``S`` with ``S S^T = noise_cov``."""
        return self._noise_factor

    def mean_step(self, x, u, gamma) -> np.ndarray:
        """``g(x, u) + Phi(x, u) gamma``."""
        return self.drift(x, u) + self.basis(x, u) @ gamma

    def jacobians(self, x, u, gamma, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
        """``(d/dx, d/du)`` of :meth:`mean_step` (central differences by default)."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.affine is not None:
            return self.affine.effective(gamma)
        if self.state_jacobian is not None:
            Jx = np.asarray(self.state_jacobian(x, u, gamma), dtype=float)
        else:
            Jx = _central_jacobian(lambda z: self.mean_step(z, u, gamma), x, eps)
        if self.input_jacobian is not None:
            Ju = np.asarray(self.input_jacobian(x, u, gamma), dtype=float)
        else:
            Ju = _central_jacobian(lambda z: self.mean_step(x, z, gamma), u, eps)
        return Jx, Ju


def _central_jacobian(f, z, eps):
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.size):
        h = eps * (1.0 + abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        cols.append((f(zp) - f(zm)) / (2.0 * h))
    return np.stack(cols, axis=1)


def affine_mode(
    name: str,
    A,
    B=None,
    Gx: Optional[Sequence] = None,
    Gu: Optional[Sequence] = None,
    *,
    prior_mean,
    prior_cov,
    noise_cov,
    prior_prob: float = 1.0,
) -> ModeModel:
    """Mode with ``g = A x + B u`` and ``Phi[:, i] = Gx[i] x + Gu[i] u``."""
    A = _frozen(A, 2, f"{name}.A")
    n_x = A.shape[0]
    n_gamma = np.atleast_1d(np.asarray(prior_mean, dtype=float)).size
    if Gu is not None:
        Gu = np.array(Gu, dtype=float).reshape(n_gamma, n_x, -1)
        n_u = Gu.shape[2]
    elif B is not None:
        n_u = np.atleast_2d(np.asarray(B, dtype=float)).shape[1]
    else:
        raise ConfigurationError(f"{name}: need B or Gu to fix the input dimension")
    B = np.zeros((n_x, n_u)) if B is None else np.array(B, dtype=float).reshape(n_x, n_u)
    Gx = np.zeros((n_gamma, n_x, n_x)) if Gx is None else np.array(Gx, dtype=float).reshape(n_gamma, n_x, n_x)
    if Gu is None:
        Gu = np.zeros((n_gamma, n_x, n_u))
    structure = AffineStructure(A, _frozen(B), _frozen(Gx), _frozen(Gu))

    def drift(x, u):
        return A @ x + B @ u

    def basis(x, u):
        return (Gx @ x + Gu @ u).T

    return ModeModel(
        name=name,
        basis=basis,
        drift=drift,
        prior_mean=np.atleast_1d(np.asarray(prior_mean, dtype=float)),
        prior_cov=np.atleast_2d(np.asarray(prior_cov, dtype=float)),
        noise_cov=np.atleast_2d(np.asarray(noise_cov, dtype=float)),
        prior_prob=prior_prob,
        affine=structure,
    )


def input_gain_mode(name: str, A, B, **kwargs) -> ModeModel:
    """``x+ = A x + diag(gamma) acting on B u``: one uncertain gain per input channel."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n_u = B.shape[1]
    Gu = np.zeros((n_u, B.shape[0], n_u))
    for i in range(n_u):
        Gu[i, :, i] = B[:, i]
    return affine_mode(name, A, np.zeros_like(B), Gu=Gu, **kwargs)


@dataclass(frozen=True, eq=False)
class ModelSet:
    """Finite set of candidate modes sharing state and input dimensions."""

    modes: tuple
    state_dim: int
    input_dim: int
    input_lower: np.ndarray
    input_upper: np.ndarray

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise ConfigurationError("model set needs at least one mode")
        lo = _frozen(np.broadcast_to(np.asarray(self.input_lower, dtype=float), (self.input_dim,)))
        hi = _frozen(np.broadcast_to(np.asarray(self.input_upper, dtype=float), (self.input_dim,)))
        if not np.all(lo < hi):
            raise ConfigurationError("input_lower must be strictly below input_upper")
        total = sum(m.prior_prob for m in modes)
        if abs(total - 1.0) > 1e-12:
            raise ConfigurationError(f"mode probabilities sum to {total:.12g}")
        x = np.zeros(self.state_dim)
        u = np.zeros(self.input_dim)
        for m in modes:
            phi = np.asarray(m.basis(x, u))
            if phi.shape != (self.state_dim, m.n_gamma):
                raise ConfigurationError(
                    f"{m.name}: basis returns shape {phi.shape}, expected {(self.state_dim, m.n_gamma)}"
                )
            if np.asarray(m.drift(x, u)).shape != (self.state_dim,):
                raise ConfigurationError(f"{m.name}: drift has wrong shape")
            if m.noise_cov.shape != (self.state_dim, self.state_dim):
                raise ConfigurationError(f"{m.name}: noise_cov shape {m.noise_cov.shape}")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "input_lower", lo)
        object.__setattr__(self, "input_upper", hi)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def prior_probs(self) -> np.ndarray:
        return np.array([m.prior_prob for m in self.modes])

    @property
    def all_affine(self) -> bool:
        return all(m.affine is not None for m in self.modes)

    def clip(self, u) -> np.ndarray:
        return np.clip(u, self.input_lower, self.input_upper)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Quadratic tracking cost ``(x - r_k)^T Q (x - r_k) + u^T R u``.

    ``reference`` holds one row per absolute time step; lookups past the end
    reuse the last row. ``stage_constant`` is added to every non-terminal
    stage and is zero for the usual tracking problem.
    """

    Q: np.ndarray
    R: np.ndarray
    QN: np.ndarray
    reference: np.ndarray
    stage_constant: float = 0.0

    def __post_init__(self):
        Q = _frozen(self.Q, 2, "Q")
        R = _frozen(self.R, 2, "R")
        QN = _frozen(self.QN, 2, "QN")
        ref = _frozen(np.atleast_2d(self.reference), 2, "reference")
        for name, M in (("Q", Q), ("R", R), ("QN", QN)):
            check_symmetric_psd(name, M)
        if ref.shape[1] != Q.shape[0] or QN.shape != Q.shape:
            raise ConfigurationError("reference / weight dimensions disagree")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "QN", QN)
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "stage_constant", float(self.stage_constant))

    def reference_window(self, start: int, length: int) -> np.ndarray:
        """Rows ``start .. start + length - 1`` of the reference (end-padded)."""
        idx = np.minimum(np.arange(start, start + length), self.reference.shape[0] - 1)
        return self.reference[idx]

    def stage(self, x, u, t: int) -> float:
        e = np.asarray(x) - self.reference_window(t, 1)[0]
        u = np.asarray(u)
        return float(e @ self.Q @ e + u @ self.R @ u) + self.stage_constant

    def terminal(self, x, t: int) -> float:
        e = np.asarray(x) - self.reference_window(t, 1)[0]
        return float(e @ self.QN @ e)


def step_truth(mode: ModeModel, true_param, x, u, w) -> np.ndarray:
    """Plant transition ``g(x, u) + Phi(x, u) gamma + w``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    gamma = np.atleast_1d(np.asarray(true_param, dtype=float))
    w = np.asarray(w, dtype=float)
    phi = np.asarray(mode.basis(x, u))
    if gamma.shape != (phi.shape[1],) or w.shape != x.shape:
        raise ConfigurationError(
            f"dimension mismatch: Phi {phi.shape}, gamma {gamma.shape}, x {x.shape}, w {w.shape}"
        )
    return mode.drift(x, u) + phi @ gamma + w


def zoh_discretize(A_c, B_c, Ts: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretisation through the augmented matrix exponential."""
    A_c = np.asarray(A_c, dtype=float)
    B_c = np.asarray(B_c, dtype=float)
    n, m = B_c.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A_c
    M[:n, n:] = B_c
    E = scipy.linalg.expm(M * Ts)
    return E[:n, :n], E[:n, n:]


def psd_sqrt(S: np.ndarray) -> np.ndarray:
    """Factor ``F`` with ``F F^T = S`` for symmetric PSD ``S``.

    Cholesky first, then Cholesky with escalating diagonal jitter
    (1e-12 .. 1e-8 relative to the largest diagonal entry), finally a
    clamped eigendecomposition. An all-zero matrix gives an all-zero factor.
    """
    S = np.asarray(S, dtype=float)
    if not np.any(S):
        return np.zeros_like(S)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    scale = max(float(np.max(np.diag(S))), np.finfo(float).tiny)
    eye = np.eye(S.shape[0])
    for jitter in (1e-12, 1e-10, 1e-8):
        try:
            return np.linalg.cholesky(S + jitter * scale * eye)
        except np.linalg.LinAlgError:
            continue
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))
