"""Gaussian-mixture toy data with exact diffused densities and scores.

Components share one isotropic variance, so after diffusion they also share
one per-dimension 2x2 covariance; densities are evaluated in log space only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import CldParams, PerDimKernel, forward_moments


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _softmax(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    sigma: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if mu.shape[0] != w.shape[0]:
            raise ValueError("one mean per weight")

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def sample(self, n: int, rng: np.random.Generator, return_labels=False):
        k = rng.choice(self.n_components, size=n, p=self.weights)
        x = self.means[k] + self.sigma * rng.standard_normal((n, self.d))
        return (x, k) if return_labels else x

    def log_prob(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        diff = x[:, None, :] - self.means[None]
        s2 = self.sigma**2
        comp = -0.5 * np.sum(diff**2, -1) / s2 - 0.5 * self.d * np.log(2 * np.pi * s2)
        return _logsumexp(comp + np.log(self.weights), axis=-1)


def nine_gaussians() -> GaussianMixture:
    a = 2.0**-0.5
    means = [
        (-a, 0.0), (-a / 2, a / 2), (0.0, a),
        (-a / 2, -a / 2), (0.0, 0.0), (a / 2, a / 2),
        (0.0, -a), (a / 2, -a / 2), (a, 0.0),
    ]
    return GaussianMixture(np.full(9, 1.0 / 9.0), np.array(means), 0.04)


def standard_normal(d: int = 1) -> GaussianMixture:
    """N(0, I_d) written as a one-component mixture."""
    return GaussianMixture(np.ones(1), np.zeros((1, d)), 1.0)


def data_nll(mix: GaussianMixture, samples) -> float:
    """Average negative log-likelihood of ``samples`` under the data density."""
    return float(-np.mean(mix.log_prob(samples)))


@dataclass(frozen=True)
class DiffusedJointMixture:
    """Joint (x, v) marginal of a mixture diffused to time ``t``."""

    t: float
    weights: np.ndarray
    means_x: np.ndarray
    means_v: np.ndarray
    kernel: PerDimKernel

    @property
    def d(self) -> int:
        return self.means_x.shape[1]

    def _precision(self):
        k = self.kernel
        det = k.sxx * k.svv - k.sxv**2
        return k.svv / det, -k.sxv / det, k.sxx / det, det

    def _component_terms(self, x, v):
        pxx, pxv, pvv, det = self._precision()
        dx = x[:, None, :] - self.means_x[None]
        dv = v[:, None, :] - self.means_v[None]
        quad = np.sum(pxx * dx * dx + 2 * pxv * dx * dv + pvv * dv * dv, -1)
        logc = -0.5 * quad - 0.5 * self.d * np.log((2 * np.pi) ** 2 * det)
        logits = logc + np.log(self.weights)
        # per-component gradients of log N_k with respect to x and v
        gx = -(pxx * dx + pxv * dv)
        gv = -(pxv * dx + pvv * dv)
        return logits, gx, gv

    def log_density(self, x, v) -> np.ndarray:
        logits, _, _ = self._component_terms(np.atleast_2d(x), np.atleast_2d(v))
        return _logsumexp(logits, axis=-1)

    def score(self, x, v):
        """Exact ``(grad_x, grad_v)`` of the joint log density."""
        logits, gx, gv = self._component_terms(np.atleast_2d(x), np.atleast_2d(v))
        r = _softmax(logits, axis=-1)[..., None]
        return np.sum(r * gx, 1), np.sum(r * gv, 1)

    def score_v(self, x, v) -> np.ndarray:
        return self.score(x, v)[1]

    def score_v_divergence(self, x, v):
        """Velocity score and its exact divergence ``sum_i d s_i / d v_i``."""
        logits, _, gv = self._component_terms(np.atleast_2d(x), np.atleast_2d(v))
        r = _softmax(logits, axis=-1)[..., None]
        s = np.sum(r * gv, 1)
        _, _, pvv, _ = self._precision()
        second = np.sum(r * gv * gv, 1)
        div = np.sum(-pvv + second - s * s, -1)
        return s, div

    def sample(self, n: int, rng: np.random.Generator):
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        e = rng.standard_normal((2, n, self.d))
        lxx = np.sqrt(self.kernel.sxx)
        lxv = self.kernel.sxv / lxx
        lvv = np.sqrt(self.kernel.svv - lxv**2)
        x = self.means_x[k] + lxx * e[0]
        v = self.means_v[k] + lxv * e[0] + lvv * e[1]
        return x, v


def diffuse(mix: GaussianMixture, p: CldParams, t: float) -> DiffusedJointMixture:
    """Diffuse every component; initial velocity is N(0, gamma0 * M)."""
    k = forward_moments(p, float(t), mix.sigma**2, p.v0_var)
    a = k.mu_coeff
    return DiffusedJointMixture(
        float(t), mix.weights, a[0, 0] * mix.means, a[1, 0] * mix.means, k
    )


# --- VPSDE baseline ---------------------------------------------------------


@dataclass(frozen=True)
class VpsdeParams:
    beta0: float = 0.1
    beta1: float = 19.9
    t_final: float = 1.0
    eps_cutoff: float = 1e-3

    def beta(self, t):
        return self.beta0 + self.beta1 * np.asarray(t, dtype=float)

    def int_beta(self, t):
        t = np.asarray(t, dtype=float)
        return self.beta0 * t + 0.5 * self.beta1 * t * t

    def alpha(self, t):
        return np.exp(-0.5 * self.int_beta(t))

    def sigma2(self, t):
        return -np.expm1(-self.int_beta(t))


def vpsde_marginal(mix: GaussianMixture, vp: VpsdeParams, t: float) -> GaussianMixture:
    a = float(vp.alpha(t))
    var = a * a * mix.sigma**2 + float(vp.sigma2(t))
    return GaussianMixture(mix.weights, a * mix.means, float(np.sqrt(var)))


def vpsde_score_x(mix: GaussianMixture, vp: VpsdeParams, x, t: float) -> np.ndarray:
    m = vpsde_marginal(mix, vp, t)
    x = np.atleast_2d(x)
    diff = x[:, None, :] - m.means[None]
    logits = -0.5 * np.sum(diff**2, -1) / m.sigma**2 + np.log(m.weights)
    r = _softmax(logits, -1)[..., None]
    return -np.sum(r * diff, 1) / m.sigma**2


# --- score-difference experiment ---------------------------------------------


def xi_experiment(
    mix: GaussianMixture,
    t_grid,
    n_mc: int,
    rng: np.random.Generator,
    p: CldParams | None = None,
    vp: VpsdeParams | None = None,
):
    """Distance of the diffused scores from their equilibrium Normal scores.

    Returns ``(xi_cld, xi_vpsde, se_cld, se_vpsde)`` arrays over ``t_grid``.
    The CLD branch requires ``M = gamma0 = 1`` so both processes share the
    prior N(0, I).
    """
    if p is None:
        p = CldParams(beta=8.0, gamma_fric=2.0, gamma0=1.0, t_final=1.0)
    if p.mass != 1.0 or p.gamma0 != 1.0:
        raise ValueError("xi experiment needs M = gamma0 = 1")
    vp = vp or VpsdeParams()
    t_grid = np.asarray(t_grid, dtype=float)
    out = np.zeros((4, len(t_grid)))
    for i, t in enumerate(t_grid):
        dm = diffuse(mix, p, t)
        x, v = dm.sample(n_mc, rng)
        # grad_v log p(u) equals grad_v log p(v | x)
        r = np.sum((dm.score_v(x, v) + v) ** 2, -1)
        out[0, i], out[2, i] = r.mean(), r.std(ddof=1) / np.sqrt(n_mc)

        xm = vpsde_marginal(mix, vp, t).sample(n_mc, rng)
        r = np.sum((vpsde_score_x(mix, vp, xm, t) + xm) ** 2, -1)
        out[1, i], out[3, i] = r.mean(), r.std(ddof=1) / np.sqrt(n_mc)
    return out[0], out[1], out[2], out[3]
