"""Score-matching objectives, control variates and importance sampling over t.

Scores follow the sampler convention ``score(x, v, t)``. The per-example
kernel target is ``grad_v log p(u_t | .) = -ell * eps_v`` so the score-space
loss ``lambda * ||s + ell*eps_v||^2`` equals the noise-prediction form
``lambda * ell^2 * ||eps_v - alpha||^2`` with ``alpha = -s / ell``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernels import CldParams, cholesky2, dsm_kernel, ell, forward_moments, hsm_kernel
from .mixtures import GaussianMixture


@dataclass(frozen=True)
class Weighting:
    """lambda(t): ``ml`` (Gamma*beta), ``reweighted`` (ell^-2), ``unit`` or ``custom``."""

    variant: str = "reweighted"
    fn: Callable | None = None

    def __post_init__(self):
        if self.variant not in ("ml", "reweighted", "unit", "custom"):
            raise ValueError(f"unknown weighting {self.variant!r}")
        if self.variant == "custom" and self.fn is None:
            raise ValueError("custom weighting needs fn")

    def __call__(self, p: CldParams, t, ell_t):
        t = np.asarray(t, dtype=float)
        if self.variant == "ml":
            return np.full(np.broadcast(t, ell_t).shape, p.gamma_fric * p.beta)
        if self.variant == "reweighted":
            return 1.0 / np.asarray(ell_t) ** 2
        if self.variant == "unit":
            return np.ones(np.broadcast(t, ell_t).shape)
        return np.asarray(self.fn(t), dtype=float) * np.ones_like(ell_t)


@dataclass
class LossSample:
    t: np.ndarray
    loss: np.ndarray
    eps_v: np.ndarray
    x: np.ndarray
    v: np.ndarray
    mu_x: np.ndarray
    mu_v: np.ndarray
    ell: np.ndarray
    kind: str
    cv: bool = False


def _col(a, n):
    """Per-example column ``(n, 1)`` from a scalar or ``(n,)`` array."""
    return np.broadcast_to(np.asarray(a, dtype=float), (n,))[:, None]


def perturb(p: CldParams, x0, t, kind: str, rng: np.random.Generator, v0=None):
    """Reparameterised draw ``u_t = mu_t + L_t eps`` from the HSM or DSM kernel.

    Returns ``(x, v, eps_v, mu_x, mu_v, ell)``. ``t`` is a scalar or one time
    per row. For DSM the initial velocity is drawn from N(0, gamma0*M) unless
    ``v0`` is given.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n, d = x0.shape
    if kind == "hsm":
        k = hsm_kernel(p, t)
        v0 = np.zeros_like(x0)
    elif kind == "dsm":
        k = dsm_kernel(p, t)
        if v0 is None:
            v0 = np.sqrt(p.v0_var) * rng.standard_normal((n, d))
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    a = k.mu_coeff
    mu_x = _col(a[..., 0, 0], n) * x0 + _col(a[..., 0, 1], n) * v0
    mu_v = _col(a[..., 1, 0], n) * x0 + _col(a[..., 1, 1], n) * v0
    ch = cholesky2(k, p.eps_num)
    e = rng.standard_normal((2, n, d))
    x = mu_x + _col(ch.lxx, n) * e[0]
    v = mu_v + _col(ch.lxv, n) * e[0] + _col(ch.lvv, n) * e[1]
    return x, v, e[1], mu_x, mu_v, np.broadcast_to(1.0 / ch.lvv, (n,)).copy()


def _score_loss(score, p, x0, t, w: Weighting, rng, kind):
    x, v, eps_v, mu_x, mu_v, l = perturb(p, x0, t, kind, rng)
    s = score(x, v, t)
    lam = w(p, t, l)
    loss = lam * np.sum((s + l[:, None] * eps_v) ** 2, -1)
    tt = np.broadcast_to(np.asarray(t, dtype=float), l.shape)
    return LossSample(tt, loss, eps_v, x, v, mu_x, mu_v, l, kind)


def hsm_loss(score, p: CldParams, x0, t, w: Weighting = Weighting(), rng=None):
    """Hybrid score matching: initial velocity marginalised in the kernel."""
    return _score_loss(score, p, x0, t, w, rng or np.random.default_rng(), "hsm")


def dsm_loss(score, p: CldParams, x0, t, w: Weighting = Weighting(), rng=None):
    """Denoising score matching conditioned on a sampled initial velocity."""
    return _score_loss(score, p, x0, t, w, rng or np.random.default_rng(), "dsm")


def hsm_dsm_offset(p: CldParams, t, d: int, weight=1.0):
    """``E[L_HSM] - E[L_DSM]`` for any fixed model, in score space.

    Both losses share the model-dependent part; only the expected squared
    norm of the kernel targets differs, which gives ``d*(ell_H^2 - ell_D^2)``.
    """
    lh = ell(hsm_kernel(p, t), p.eps_num)
    ld = ell(dsm_kernel(p, t), p.eps_num)
    return weight * d * (lh**2 - ld**2)


# --- control variates ---------------------------------------------------------


def _alphas(score, p, x0, t, rng, kind):
    x, v, eps_v, mu_x, mu_v, l = perturb(p, x0, t, kind, rng)
    lc = l[:, None]
    a_u = -score(x, v, t) / lc
    a_mu = -score(mu_x, mu_v, t) / lc
    tt = np.broadcast_to(np.asarray(t, dtype=float), l.shape)
    return LossSample(tt, None, eps_v, x, v, mu_x, mu_v, l, kind, True), a_u, a_mu


def cv_term_ml(eps_v, a_mu, l):
    l2 = np.asarray(l)[..., None] ** 2
    return np.sum(l2 * (eps_v * eps_v - 2 * eps_v * a_mu), -1)


def cv_term_fid(eps_v, a_mu):
    return np.sum(eps_v * eps_v - 2 * eps_v * a_mu, -1)


def cv_loss_ml(score, p: CldParams, x0, t, rng=None, kind="hsm", with_plain=False):
    """ML-weighted loss minus its control variate, constant ``ell^2 d`` dropped.

    The Gamma*beta prefactor is left out. With ``with_plain`` the matching
    plain loss ``ell^2 ||eps - alpha(u)||^2`` on the same draw is returned too.
    """
    ls, a_u, a_mu = _alphas(score, p, x0, t, rng or np.random.default_rng(), kind)
    l2 = ls.ell**2
    e = ls.eps_v
    ls.loss = l2 * np.sum(a_u * a_u - 2 * e * (a_u - a_mu), -1)
    if with_plain:
        return ls, l2 * np.sum((e - a_u) ** 2, -1)
    return ls


def cv_loss_fid(score, p: CldParams, x0, t, rng=None, kind="hsm", with_plain=False):
    """Reweighted loss minus its control variate, constant ``d`` dropped."""
    ls, a_u, a_mu = _alphas(score, p, x0, t, rng or np.random.default_rng(), kind)
    e = ls.eps_v
    ls.loss = np.sum(a_u * a_u - 2 * e * (a_u - a_mu), -1)
    if with_plain:
        return ls, np.sum((e - a_u) ** 2, -1)
    return ls


# --- importance sampling over t ---------------------------------------------------


def _inv2(m):
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] ** 2
    if np.any(np.abs(det) < 1e-300):
        raise np.linalg.LinAlgError("singular assumed-Gaussian covariance")
    adj = np.empty_like(m)
    adj[..., 0, 0] = m[..., 1, 1]
    adj[..., 1, 1] = m[..., 0, 0]
    adj[..., 0, 1] = adj[..., 1, 0] = -m[..., 0, 1]
    return adj / det[..., None, None]


@dataclass(frozen=True)
class ImportanceModel:
    """Expected per-time loss when the data are N(0, I).

    The model score is the exact score of the Gaussian-data marginal,
    ``-Sigma_bar_t^{-1} u``. ``conditioning`` selects which kernel supplies
    the per-example target.
    """

    p: CldParams
    conditioning: str = "dsm"

    def __post_init__(self):
        if self.conditioning not in ("hsm", "dsm"):
            raise ValueError("conditioning must be 'hsm' or 'dsm'")

    def sigma_bar(self, t):
        return forward_moments(self.p, t, 1.0, self.p.v0_var).cov()

    def exp_factor(self, t):
        return np.exp(-4.0 * self.p.beta * np.asarray(t, dtype=float) / self.p.gamma_fric)

    def K(self, t):
        """Covariance with the exponential factor taken out."""
        return self.sigma_bar(t) / self.exp_factor(t)[..., None, None]

    def ell_bar(self, t):
        return ell(forward_moments(self.p, t, 1.0, self.p.v0_var), 0.0)

    def kernel(self, t):
        return dsm_kernel(self.p, t) if self.conditioning == "dsm" else hsm_kernel(self.p, t)

    def _parts(self, t):
        t = np.asarray(t, dtype=float)
        k = self.kernel(t)
        ch = cholesky2(k, self.p.eps_num)
        lmat = np.zeros(t.shape + (2, 2))
        lmat[..., 0, 0] = ch.lxx
        lmat[..., 1, 0] = ch.lxv
        lmat[..., 1, 1] = ch.lvv
        prec = _inv2(self.sigma_bar(t))
        c = np.einsum("...j,...jk->...k", prec[..., 1, :], lmat)
        s0 = np.zeros(t.shape + (2, 2))
        s0[..., 0, 0] = 1.0
        if self.conditioning == "dsm":
            s0[..., 1, 1] = self.p.v0_var
        a = k.mu_coeff
        cov_mu = a @ s0 @ np.swapaxes(a, -1, -2)
        w = prec[..., 1, :]
        mean_term = np.einsum("...j,...jk,...k->...", w, cov_mu, w)
        return mean_term, c[..., 0], c[..., 1], 1.0 / ch.lvv

    def mean_term(self, t, d: int):
        return d * self._parts(t)[0]

    def weights(self, t, d: int, form: str = "exact"):
        """``dict(ml, fid, mlc, fidc)`` of expected losses at ``t``.

        ``form="exact"`` uses the full kernel factor. ``form="assumed"``
        replaces it by the assumed-Gaussian scale, so the data-noise terms
        reduce to functions of ``ell_bar`` and ``ell`` only.
        """
        mt, cx, cv, l = self._parts(t)
        mt = d * mt
        if form == "exact":
            ml = mt + d * (cx**2 + (cv - l) ** 2)
            mlc = mt + d * (cx**2 + cv**2 - 2 * l * cv)
            return {"ml": ml, "fid": ml / l**2, "mlc": mlc, "fidc": mlc / l**2}
        if form == "assumed":
            lb = self.ell_bar(t)
            return {
                "ml": mt + (lb - l) ** 2 * d,
                "fid": mt / l + (lb / l - 1) ** 2 * d,
                "mlc": mt + (lb**2 - 2 * l * lb) * d,
                "fidc": mt / l + (lb**2 / l**2 - 2 * lb / l) * d,
            }
        raise ValueError(f"unknown form {form!r}")


def is_weight(im: ImportanceModel, t, variant: str, d: int, form: str = "exact"):
    return im.weights(t, d, form)[variant.lower()]


def is_weight_mc(im: ImportanceModel, t: float, d: int, n: int, rng):
    """Monte Carlo estimate of ``(ml, mlc)`` with their standard errors."""
    p = im.p
    x0 = rng.standard_normal((n, d))
    x, v, eps_v, mu_x, mu_v, l = perturb(p, x0, t, im.conditioning, rng)
    sb = im.sigma_bar(t)
    prec = _inv2(sb)

    def score(xx, vv):
        return -(prec[1, 0] * xx + prec[1, 1] * vv)

    s = score(x, v)
    lc = l[:, None]
    ml = np.sum((s + lc * eps_v) ** 2, -1)
    a_u, a_mu = -s / lc, -score(mu_x, mu_v) / lc
    mlc = l**2 * np.sum(a_u * a_u - 2 * eps_v * (a_u - a_mu), -1)
    se = lambda r: r.std(ddof=1) / np.sqrt(n)
    return ml.mean(), se(ml), mlc.mean(), se(mlc)


class TimeProposal:
    """Density over ``[t_lo, t_hi]`` proportional to a piecewise-linear curve."""

    def __init__(self, grid, weights):
        grid = np.asarray(grid, dtype=float)
        w = np.asarray(weights, dtype=float)
        if grid.ndim != 1 or grid.shape != w.shape or len(grid) < 2:
            raise ValueError("grid and weights must be matching 1-d arrays")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be increasing")
        if np.any(w < 0) or not np.any(w > 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite, non-negative and not all zero")
        seg = 0.5 * (w[1:] + w[:-1]) * np.diff(grid)
        self.grid = grid
        self.z = seg.sum()
        self.w = w / self.z
        self.cdf = np.concatenate([[0.0], np.cumsum(seg) / self.z])

    @classmethod
    def from_model(cls, im: ImportanceModel, variant: str, d: int, t_cut=1e-5, n_grid=256):
        grid = np.linspace(t_cut, im.p.t_final, n_grid)
        return cls(grid, is_weight(im, grid, variant, d))

    def pdf(self, t):
        return np.interp(t, self.grid, self.w)

    def sample(self, n: int, rng):
        u = rng.random(n)
        i = np.clip(np.searchsorted(self.cdf, u, side="right") - 1, 0, len(self.grid) - 2)
        t0, h = self.grid[i], self.grid[i + 1] - self.grid[i]
        w0, w1 = self.w[i], self.w[i + 1]
        r = u - self.cdf[i]
        slope = (w1 - w0) / h
        # solve w0*s + slope*s^2/2 = r for the offset s in the segment
        disc = np.sqrt(np.maximum(w0 * w0 + 2 * slope * r, 0.0))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            s = np.where(np.abs(slope) > 1e-12 * np.maximum(w0, 1e-300),
                         (disc - w0) / slope, r / np.where(w0 > 0, w0, 1.0))
        return np.clip(t0 + s, self.grid[0], self.grid[-1])

    def correction(self, t):
        """Factor making per-sample losses unbiased for uniform t."""
        span = self.grid[-1] - self.grid[0]
        return (1.0 / span) / self.pdf(t)


# --- gradient-variance study -------------------------------------------------------


def grad_variance_study(score, mix: GaussianMixture, p: CldParams, t_grid, n_mc: int, rng):
    """Trace of the covariance of ``s(u_t) - target`` for both kernels.

    Returns ``(trace_hsm, trace_dsm)`` arrays over ``t_grid``.
    """
    out = np.zeros((2, len(t_grid)))
    for i, t in enumerate(np.asarray(t_grid, dtype=float)):
        for j, kind in enumerate(("hsm", "dsm")):
            x0 = mix.sample(n_mc, rng)
            x, v, eps_v, _, _, l = perturb(p, x0, t, kind, rng)
            k = score(x, v, t) + l[:, None] * eps_v
            out[j, i] = np.sum(np.var(k, axis=0, ddof=1))
    return out[0], out[1]
