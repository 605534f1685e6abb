"""Reverse-time samplers for CLD and the VPSDE baseline.

Score callables for CLD have the signature ``score(x, v, t) -> (n, d)`` and
return an estimate of the velocity score at forward time ``t``; VPSDE scores
are ``score(x, t)``. State batches carry the forward time of the marginal
they are meant to follow, running from ``T`` down to ``eps``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernels import CldParams, cholesky2, sscs_half_moments
from .mixtures import GaussianMixture, VpsdeParams, diffuse, vpsde_score_x

CldScore = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
DataScore = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class TimeSchedule:
    kind: str
    n_steps: int
    t_final: float
    eps_cutoff: float
    steps: np.ndarray  # reverse order: first entry is taken first, starting at T

    def times(self) -> np.ndarray:
        """Forward times at the start of each reverse step, then the end point."""
        return self.t_final - np.concatenate([[0.0], np.cumsum(self.steps)])


def make_schedule(kind: str, n_steps: int, t_final: float = 1.0, eps: float = 1e-3):
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0 <= eps < t_final:
        raise ValueError("need 0 <= eps < t_final")
    span = t_final - eps
    if kind == "uniform":
        steps = np.full(n_steps, span / n_steps)
    elif kind == "quadratic":
        c = span / n_steps**2
        j = np.arange(1, n_steps + 1)
        steps = c * (2 * n_steps - 2 * j + 1)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    # absorb rounding so the steps sum to T - eps exactly in floating point
    steps[-1] = span - steps[:-1].sum()
    return TimeSchedule(kind, n_steps, t_final, eps, steps)


@dataclass
class StateBatch:
    x: np.ndarray
    v: np.ndarray
    t: float

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def sample_prior(p: CldParams, n: int, d: int, rng: np.random.Generator) -> StateBatch:
    """Draw from the equilibrium N(0, I) x N(0, M I)."""
    x = rng.standard_normal((n, d))
    v = np.sqrt(p.mass) * rng.standard_normal((n, d))
    return StateBatch(x, v, p.t_final)


class MixtureScore:
    """Exact velocity score of a diffused Gaussian mixture."""

    def __init__(self, mix: GaussianMixture, p: CldParams):
        self.mix = mix
        self.p = p
        self._cache = {}

    def diffused(self, t: float):
        t = float(t)
        dm = self._cache.get(t)
        if dm is None:
            if len(self._cache) > 64:
                self._cache.clear()
            dm = self._cache[t] = diffuse(self.mix, self.p, t)
        return dm

    def __call__(self, x, v, t):
        return self.diffused(t).score_v(x, v)

    def with_divergence(self, x, v, t):
        return self.diffused(t).score_v_divergence(x, v)


class VpsdeMixtureScore:
    def __init__(self, mix: GaussianMixture, vp: VpsdeParams):
        self.mix = mix
        self.vp = vp

    def __call__(self, x, t):
        return vpsde_score_x(self.mix, self.vp, x, t)


# --- CLD ----------------------------------------------------------------------


def em_step_cld(p: CldParams, score: CldScore, batch: StateBatch, dt: float, noise):
    """One explicit Euler-Maruyama step of the generative SDE.

    ``noise`` is a standard-normal array shaped like ``batch.v``.
    """
    b, g, im = p.beta, p.gamma_fric, p.inv_mass
    x, v = batch.x, batch.v
    s = score(x, v, batch.t)
    x_new = x - b * im * v * dt
    v_new = v + (b * x + b * g * im * v + 2 * g * b * s) * dt + np.sqrt(2 * g * b * dt) * noise
    return StateBatch(x_new, v_new, batch.t - dt)


def denoise(p: CldParams, batch: StateBatch, eps: float, score: CldScore | None = None):
    """Noise-free Euler step from ``eps`` to 0.

    The data update does not involve the score. The velocity is only updated
    when ``score`` is given.
    """
    b, g, im = p.beta, p.gamma_fric, p.inv_mass
    x, v = batch.x, batch.v
    x0 = x - eps * b * im * v
    if score is None:
        v0 = v
    else:
        v0 = v + eps * (b * x + b * g * im * v + 2 * g * b * score(x, v, batch.t))
    return StateBatch(x0, v0, batch.t - eps)


def em_run_cld(
    p: CldParams,
    score: CldScore,
    prior: StateBatch,
    sched: TimeSchedule,
    rng: np.random.Generator,
    denoise_velocity: bool = False,
) -> StateBatch:
    batch = prior
    for dt in sched.steps:
        batch = em_step_cld(p, score, batch, dt, rng.standard_normal(batch.v.shape))
    return denoise(p, batch, sched.eps_cutoff, score if denoise_velocity else None)


def _half_step(p: CldParams, x, v, dt_half, rng):
    k = sscs_half_moments(p, dt_half)
    a = k.mu_coeff
    mx = a[0, 0] * x + a[0, 1] * v
    mv = a[1, 0] * x + a[1, 1] * v
    chol = cholesky2(k, p.eps_num)
    e = rng.standard_normal((2,) + x.shape)
    return mx + chol.lxx * e[0], mv + chol.lxv * e[0] + chol.lvv * e[1]


def sscs_run(
    p: CldParams,
    score: CldScore,
    prior: StateBatch,
    sched: TimeSchedule,
    rng: np.random.Generator,
    denoise_velocity: bool = False,
    denoise_data: bool = True,
    score_time: str = "start",
) -> StateBatch:
    """Symmetric splitting sampler.

    Each step applies the exact score-free propagator for half a step, an
    Euler step of the remaining score term, and a second exact half step.
    ``score_time`` picks the time label passed to the score in the Euler
    step: the step's start time or its midpoint.
    """
    if score_time not in ("start", "mid"):
        raise ValueError("score_time must be 'start' or 'mid'")
    lag = 0.5 if score_time == "mid" else 0.0
    b, g, im = p.beta, p.gamma_fric, p.inv_mass
    x, v, t = prior.x, prior.v, prior.t
    for dt in sched.steps:
        x, v = _half_step(p, x, v, 0.5 * dt, rng)
        s = score(x, v, t - lag * dt)
        v = v + dt * 2 * b * g * (s + im * v)
        x, v = _half_step(p, x, v, 0.5 * dt, rng)
        t = t - dt
    batch = StateBatch(x, v, t)
    if not denoise_data:
        return batch
    return denoise(p, batch, sched.eps_cutoff, score if denoise_velocity else None)


# --- VPSDE baseline -----------------------------------------------------------


def vpsde_em_run(
    vp: VpsdeParams,
    score: DataScore,
    prior: np.ndarray,
    sched: TimeSchedule,
    rng: np.random.Generator,
    denoise_data: bool = True,
) -> np.ndarray:
    x = prior
    t = sched.t_final
    for dt in sched.steps:
        bt = float(vp.beta(t))
        drift = 0.5 * bt * x + bt * score(x, t)
        x = x + drift * dt + np.sqrt(bt * dt) * rng.standard_normal(x.shape)
        t = t - dt
    if denoise_data:
        eps = sched.eps_cutoff
        bt = float(vp.beta(t))
        x = x + eps * (0.5 * bt * x + bt * score(x, t))
    return x


def ddim_run(vp: VpsdeParams, score: DataScore, prior: np.ndarray, sched: TimeSchedule):
    """Deterministic DDIM update on the schedule's time grid (ends at ``eps``)."""
    x = prior
    times = sched.times()
    for t, t_next in zip(times[:-1], times[1:]):
        a, a_next = float(vp.alpha(t)), float(vp.alpha(t_next))
        sig, sig_next = np.sqrt(float(vp.sigma2(t))), np.sqrt(float(vp.sigma2(t_next)))
        s = score(x, t)
        x = (a_next / a) * (x + sig * sig * s) - sig_next * sig * s
    return x


# --- forward simulation for the damping study -------------------------------------


def forward_trajectories(
    beta: float,
    gamma_fric: float,
    mass: float,
    x0: np.ndarray,
    v0: np.ndarray,
    n_steps: int,
    t_final: float,
    rng: np.random.Generator,
    record_every: int = 1,
):
    """Euler-Maruyama paths of the forward Langevin SDE for any damping.

    Returns ``(times, xs, vs)`` with ``xs`` shaped ``(n_records, n, d)``.
    """
    dt = t_final / n_steps
    x, v = np.array(x0, dtype=float), np.array(v0, dtype=float)
    times, xs, vs = [0.0], [x.copy()], [v.copy()]
    amp = np.sqrt(2 * gamma_fric * beta * dt)
    for i in range(1, n_steps + 1):
        x_new = x + beta / mass * v * dt
        v = v - beta * x * dt - gamma_fric * beta / mass * v * dt + amp * rng.standard_normal(v.shape)
        x = x_new
        if i % record_every == 0:
            times.append(i * dt)
            xs.append(x.copy())
            vs.append(v.copy())
    return np.array(times), np.stack(xs), np.stack(vs)


def moment_distance(xs, vs, mass: float):
    """Sup-distance of empirical first/second moments to equilibrium.

    Velocities are rescaled by ``sqrt(M)`` so every target moment is 0 or 1.
    ``xs, vs`` are shaped (n_records, n, d); returns one value per record.
    """
    ws = vs / np.sqrt(mass)
    parts = [
        np.abs(xs.mean(1)).max(-1),
        np.abs(ws.mean(1)).max(-1),
        np.abs((xs * xs).mean(1) - 1.0).max(-1),
        np.abs((xs * ws).mean(1)).max(-1),
        np.abs((ws * ws).mean(1) - 1.0).max(-1),
    ]
    return np.max(np.stack(parts), 0)


def time_to_equilibrium(times, dist, tol: float = 0.05) -> float:
    """First time after which ``dist`` stays below ``tol`` (inf if never)."""
    above = np.nonzero(dist >= tol)[0]
    if len(above) == 0:
        return float(times[0])
    if above[-1] == len(times) - 1:
        return float("inf")
    return float(times[above[-1] + 1])


def autocorrelation(series, max_lag: int):
    """Autocorrelation of an (n_time, n) array pooled over columns.

    Centring uses the pooled mean; per-column time means bias short windows
    towards negative correlation.
    """
    z = series - series.mean()
    var = np.mean(z * z)
    return np.array([np.mean(z[: len(z) - k] * z[k:]) / var for k in range(max_lag + 1)])


def has_sign_change(acf, floor: float = 0.02) -> bool:
    """True when the autocorrelation dips below ``-floor`` after starting positive."""
    return bool(acf[0] > 0 and np.any(acf < -floor))


def langevin_moments(beta, gamma_fric, mass, m0, s0, t_final, n_steps):
    """Exact mean and covariance of the forward Langevin SDE for any damping.

    ``m0`` is the initial (x, v) mean and ``s0`` the 2x2 initial covariance.
    Moments are propagated on a uniform grid with the exact one-step
    transition, so long horizons do not overflow. Returns
    ``(times, means, covs)``.
    """
    from scipy.linalg import expm

    dt = t_final / n_steps
    f = np.array([[0.0, beta / mass], [-beta, -gamma_fric * beta / mass]])
    q = np.array([[0.0, 0.0], [0.0, 2.0 * gamma_fric * beta]])
    # Van Loan block exponential: transition matrix and one-step noise covariance
    blk = np.zeros((4, 4))
    blk[:2, :2] = -f
    blk[:2, 2:] = q
    blk[2:, 2:] = f.T
    e = expm(blk * dt)
    phi = e[2:, 2:].T
    qdt = phi @ e[:2, 2:]
    m, c = np.asarray(m0, dtype=float), np.asarray(s0, dtype=float)
    means, covs = [m], [c]
    for _ in range(n_steps):
        m = phi @ m
        c = phi @ c @ phi.T + qdt
        means.append(m)
        covs.append(c)
    return np.linspace(0.0, t_final, n_steps + 1), np.array(means), np.array(covs)


def exact_moment_distance(means, covs, mass):
    """:func:`moment_distance` evaluated on exact moments."""
    r = np.sqrt(mass)
    return np.max(
        np.stack(
            [
                np.abs(means[:, 0]),
                np.abs(means[:, 1]) / r,
                np.abs(covs[:, 0, 0] + means[:, 0] ** 2 - 1.0),
                np.abs(covs[:, 0, 1] + means[:, 0] * means[:, 1]) / r,
                np.abs((covs[:, 1, 1] + means[:, 1] ** 2) / mass - 1.0),
            ]
        ),
        0,
    )
