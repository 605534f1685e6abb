"""Closed-form moments of the critically-damped Langevin diffusion.

Every quantity is stored per data dimension: the full covariance of the
joint state is ``Sigma ⊗ I_d`` with a 2x2 block ``Sigma``, so nothing here
ever builds a 2d x 2d matrix. Functions accept scalar or array ``t`` and
broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CholeskyError(ArithmeticError):
    """Raised when a 2x2 covariance block is not positive definite."""


@dataclass(frozen=True)
class CldParams:
    """Hyperparameters of the diffusion.

    ``mass`` defaults to the critical value ``gamma_fric**2 / 4`` and any other
    value is rejected.
    """

    beta: float = 4.0
    gamma_fric: float = 1.0
    mass: float | None = None
    gamma0: float = 0.04
    t_final: float = 1.0
    eps_cutoff: float = 1e-3
    eps_num: float = 1e-9

    def __post_init__(self):
        critical = self.gamma_fric**2 / 4.0
        if self.mass is None:
            object.__setattr__(self, "mass", critical)
        if self.mass != critical:
            raise ValueError(
                f"mass={self.mass} violates critical damping (expected {critical})"
            )
        if self.beta <= 0 or self.gamma_fric <= 0:
            raise ValueError("beta and gamma_fric must be positive")
        if self.gamma0 <= 0:
            raise ValueError("gamma0 must be positive")
        if not 0 <= self.eps_cutoff < self.t_final:
            raise ValueError("need 0 <= eps_cutoff < t_final")
        if self.eps_num < 0:
            raise ValueError("eps_num must be non-negative")

    @property
    def inv_mass(self) -> float:
        return 1.0 / self.mass

    @property
    def v0_var(self) -> float:
        """Variance of the initial velocity distribution, gamma * M."""
        return self.gamma0 * self.mass

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "gamma_fric": self.gamma_fric,
            "mass": self.mass,
            "gamma0": self.gamma0,
            "t_final": self.t_final,
            "eps_cutoff": self.eps_cutoff,
            "eps_num": self.eps_num,
        }


@dataclass(frozen=True)
class PerDimKernel:
    """Gaussian moments of one (x, v) pair.

    ``mu_coeff[..., i, j]`` maps the initial mean ``(x0, v0)`` to the mean at
    time ``t``; ``sxx, sxv, svv`` are the covariance entries.
    """

    mu_coeff: np.ndarray
    sxx: np.ndarray
    sxv: np.ndarray
    svv: np.ndarray
    t: np.ndarray = field(default=None)

    def mean(self, x0, v0):
        """Push initial means ``x0, v0`` (broadcastable) through the kernel."""
        a = self.mu_coeff
        ax = _expand(a[..., 0, 0], x0)
        bx = _expand(a[..., 0, 1], x0)
        av = _expand(a[..., 1, 0], x0)
        bv = _expand(a[..., 1, 1], x0)
        return ax * x0 + bx * v0, av * x0 + bv * v0

    def cov(self) -> np.ndarray:
        return np.stack(
            [np.stack([self.sxx, self.sxv], -1), np.stack([self.sxv, self.svv], -1)], -2
        )


@dataclass(frozen=True)
class CholFactor:
    lxx: np.ndarray
    lxv: np.ndarray
    lvv: np.ndarray


def _expand(coef, like):
    """Right-pad ``coef`` with axes so it broadcasts against a batch ``like``."""
    coef = np.asarray(coef)
    like = np.asarray(like)
    if coef.ndim == 0 or like.ndim <= coef.ndim:
        return coef
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def _exp_remainder3(x):
    """e^x - 1 - x - x^2/2 without cancellation for small x."""
    x = np.asarray(x, dtype=float)
    out = np.expm1(x) - x - 0.5 * x * x
    small = np.abs(x) < 0.1
    if np.any(small):
        xs = x[small] if x.ndim else x
        term = xs**3 / 6.0
        acc = np.zeros_like(xs) + term
        for k in range(4, 14):
            term = term * xs / k
            acc = acc + term
        if x.ndim:
            out[small] = acc
        else:
            out = acc
    return out


def _check_time(p: CldParams, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > p.t_final * (1 + 1e-12)):
        raise ValueError(f"t must lie in [0, {p.t_final}]")
    return t


def forward_moments(p: CldParams, t, s0xx=0.0, s0vv=0.0) -> PerDimKernel:
    """Moments of the forward diffusion started from ``diag(s0xx, s0vv)``.

    With ``s0xx = s0vv = 0`` this is the kernel conditioned on ``(x0, v0)``;
    ``s0vv = gamma0 * M`` marginalises the initial velocity.
    """
    t = _check_time(p, t)
    g = p.gamma_fric
    b = p.beta * t
    x = 4.0 * b / g
    e_half = np.exp(-2.0 * b / g)
    e_full = e_half * e_half

    mu = np.empty(t.shape + (2, 2))
    mu[..., 0, 0] = (2.0 * b / g + 1.0) * e_half
    mu[..., 0, 1] = 4.0 * b / g**2 * e_half
    mu[..., 1, 0] = -b * e_half
    mu[..., 1, 1] = (1.0 - 2.0 * b / g) * e_half

    sxx = (
        s0xx * (1.0 + x + 0.25 * x * x) + _exp_remainder3(x) + 16.0 * b * b / g**4 * s0vv
    ) * e_full
    sxv = (
        -b * s0xx
        + 4.0 * b / g**2 * s0vv
        - 2.0 * b * b / g * (s0xx - 2.0)
        - 8.0 * b * b / g**3 * s0vv
    ) * e_full
    svv = (
        0.25 * g * g * np.expm1(x)
        + b * g
        + s0vv * (1.0 + 4.0 * b * b / g**2 - 4.0 * b / g)
        + b * b * (s0xx - 2.0)
    ) * e_full
    return PerDimKernel(mu, sxx, sxv, svv, t)


def hsm_kernel(p: CldParams, t) -> PerDimKernel:
    """Kernel conditioned on ``x0`` only (initial velocity marginalised)."""
    return forward_moments(p, t, 0.0, p.v0_var)


def dsm_kernel(p: CldParams, t) -> PerDimKernel:
    """Kernel conditioned on both ``x0`` and ``v0``."""
    return forward_moments(p, t, 0.0, 0.0)


def cholesky2(k: PerDimKernel, eps_num: float = 0.0) -> CholFactor:
    sxx = k.sxx + eps_num
    svv = k.svv + eps_num
    if np.any(sxx <= 0):
        raise CholeskyError("non-positive x-variance")
    lxx = np.sqrt(sxx)
    lxv = k.sxv / lxx
    rem = svv - lxv * lxv
    if np.any(rem < 0):
        raise CholeskyError(f"covariance not PSD after eps_num={eps_num}")
    return CholFactor(lxx, lxv, np.sqrt(rem))


def ell(k: PerDimKernel, eps_num: float = 0.0):
    """Scale linking the velocity score of the kernel to its noise draw."""
    sxx = k.sxx + eps_num
    svv = k.svv + eps_num
    det = sxx * svv - k.sxv * k.sxv
    if np.any(sxx <= 0) or np.any(det <= 0):
        raise CholeskyError("singular kernel covariance")
    return np.sqrt(sxx / det)


def equilibrium(p: CldParams) -> PerDimKernel:
    return PerDimKernel(
        np.zeros((2, 2)), np.asarray(1.0), np.asarray(0.0), np.asarray(p.mass), np.inf
    )


def sscs_half_moments(p: CldParams, dt_half) -> PerDimKernel:
    """Exact propagator of the score-free reverse dynamics over ``dt_half``.

    It is the forward kernel with the Hamiltonian coupling reversed, which
    flips the sign of the off-diagonal entries.
    """
    dt_half = np.asarray(dt_half, dtype=float)
    if np.any(dt_half < 0):
        raise ValueError("dt_half must be non-negative")
    g = p.gamma_fric
    b = p.beta * dt_half
    x = 4.0 * b / g
    e_half = np.exp(-2.0 * b / g)
    e_full = e_half * e_half

    mu = np.empty(dt_half.shape + (2, 2))
    mu[..., 0, 0] = (2.0 * b / g + 1.0) * e_half
    mu[..., 0, 1] = -4.0 * b / g**2 * e_half
    mu[..., 1, 0] = b * e_half
    mu[..., 1, 1] = (1.0 - 2.0 * b / g) * e_half

    sxx = _exp_remainder3(x) * e_full
    sxv = -4.0 * b * b / g * e_full
    svv = (0.25 * g * g * np.expm1(x) + b * g - 2.0 * b * b) * e_full
    return PerDimKernel(mu, sxx, sxv, svv, dt_half)


def moment_ode_rhs(p: CldParams, mu, cov, reverse: bool = False):
    """Right-hand side of the mean/covariance ODEs of the affine dynamics.

    ``mu`` has shape (..., 2) and ``cov`` shape (..., 2, 2). ``reverse``
    selects the score-free generative dynamics used inside the splitting
    sampler.
    """
    f = drift_matrix(p, reverse=reverse)
    q = np.array([[0.0, 0.0], [0.0, 2.0 * p.gamma_fric * p.beta]])
    dmu = mu @ f.T
    fs = f @ cov
    dcov = fs + np.swapaxes(fs, -1, -2) + q
    return dmu, dcov


def drift_matrix(p: CldParams, reverse: bool = False) -> np.ndarray:
    s = -1.0 if reverse else 1.0
    return np.array(
        [
            [0.0, s * p.beta / p.mass],
            [-s * p.beta, -p.gamma_fric * p.beta / p.mass],
        ]
    )
