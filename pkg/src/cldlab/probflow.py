"""Probability-flow ODE: sampling, adaptive integration and likelihoods.

Time conventions: ``tau`` is reverse time (0 at T), ``t = T - tau`` is the
forward time handed to score functions. Likelihoods integrate the forward
flow from ``eps`` to ``T`` together with the accumulated divergence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .kernels import CldParams
from .samplers import StateBatch, denoise


class OdeError(RuntimeError):
    pass


@dataclass(frozen=True)
class OdeConfig:
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 100_000
    hutchinson_probes: int = 1
    probe_dist: str = "rademacher"
    fd_step: float = 1e-5
    first_step: float | None = None

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.hutchinson_probes < 1:
            raise ValueError("need at least one probe")
        if self.probe_dist not in ("rademacher", "gaussian"):
            raise ValueError(f"unknown probe distribution {self.probe_dist!r}")


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B5 - _B4


def _initial_step(rhs, t0, y0, f0, direction, cfg):
    scale = cfg.atol + cfg.rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = rhs(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1)


def rk45(rhs, y0, t_span, cfg: OdeConfig = OdeConfig()):
    """Adaptive Dormand-Prince integration of ``y' = rhs(t, y)``.

    Returns ``(y_final, nfe)``. The error norm is the RMS over all entries
    of ``y`` scaled by ``atol + rtol*max(|y_old|, |y_new|)``; the step size
    uses a PI controller.
    """
    t0, t1 = map(float, t_span)
    y = np.array(y0, dtype=float)
    if t1 == t0:
        return y, 0
    direction = np.sign(t1 - t0)
    nfe = 0

    def f(t, yy):
        nonlocal nfe
        nfe += 1
        return rhs(t, yy)

    k0 = f(t0, y)
    h = cfg.first_step or _initial_step(f, t0, y, k0, direction, cfg)
    t = t0
    err_prev = 1e-4
    safety, k_i, k_p = 0.9, 0.7 / 5, 0.4 / 5
    steps = 0
    while direction * (t1 - t) > 0:
        if steps >= cfg.max_steps:
            raise OdeError(f"max_steps={cfg.max_steps} exceeded at t={t}")
        h = min(h, abs(t1 - t))
        if h < 1e-14 * max(1.0, abs(t)):
            raise OdeError(f"step size underflow at t={t}")
        ks = [k0]
        for i in range(1, 7):
            yi = y + direction * h * sum(a * k for a, k in zip(_A[i], ks))
            ks.append(f(t + direction * h * _C[i], yi))
        y_new = y + direction * h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err = direction * h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        steps += 1
        if err_norm <= 1.0:
            t = t + direction * h
            y = y_new
            k0 = ks[6]  # first-same-as-last
            err_norm = max(err_norm, 1e-10)
            fac = safety * err_norm**-k_i * err_prev**k_p
            h = h * min(5.0, max(0.2, fac))
            err_prev = err_norm
        else:
            h = h * max(0.2, safety * err_norm**-0.2)
    return y, nfe


# --- CLD probability flow -----------------------------------------------------


def cld_ode_rhs(p: CldParams, score, x, v, t):
    """Reverse-time probability-flow field at forward time ``t``."""
    b, g, im = p.beta, p.gamma_fric, p.inv_mass
    s = score(x, v, t)
    return -b * im * v, b * x + g * b * (s + im * v)


def _pack(x, v, extra=None):
    parts = [x.ravel(), v.ravel()]
    if extra is not None:
        parts.append(np.ravel(extra))
    return np.concatenate(parts)


def _unpack(y, n, d):
    k = n * d
    return y[:k].reshape(n, d), y[k : 2 * k].reshape(n, d), y[2 * k :]


def probflow_sample(p: CldParams, score, prior: StateBatch, cfg: OdeConfig = OdeConfig()):
    """Integrate the flow from ``T`` to ``eps`` and apply the denoising step.

    Returns ``(StateBatch, nfe)``.
    """
    n, d = prior.x.shape
    eps = p.eps_cutoff

    def rhs(tau, y):
        x, v, _ = _unpack(y, n, d)
        dx, dv = cld_ode_rhs(p, score, x, v, p.t_final - tau)
        return _pack(dx, dv)

    y, nfe = rk45(rhs, _pack(prior.x, prior.v), (0.0, p.t_final - eps), cfg)
    x, v, _ = _unpack(y, n, d)
    return denoise(p, StateBatch(x, v, eps), eps), nfe


def _probes(rng, shape, dist):
    if dist == "rademacher":
        return rng.integers(0, 2, size=shape) * 2.0 - 1.0
    return rng.standard_normal(shape)


def hutchinson_trace(field, u, n_probes: int, rng, dist: str = "rademacher", h: float = 1e-5):
    """Unbiased trace estimates of the Jacobian of ``field`` at ``u``.

    ``u`` has shape (n, k); returns an (n_probes, n) array of single-probe
    estimates ``e^T J e`` using central directional differences.
    """
    u = np.asarray(u, dtype=float)
    out = np.empty((n_probes,) + u.shape[:1])
    for j in range(n_probes):
        e = _probes(rng, u.shape, dist)
        jv = (field(u + h * e) - field(u - h * e)) / (2 * h)
        out[j] = np.sum(e * jv, -1)
    return out


def prior_logp(p: CldParams, x, v):
    d = x.shape[-1]
    return (
        -0.5 * np.sum(x * x, -1)
        - 0.5 * np.sum(v * v, -1) / p.mass
        - d * np.log(2 * np.pi)
        - 0.5 * d * np.log(p.mass)
    )


@dataclass
class LikelihoodResult:
    logp_joint: np.ndarray
    nfe: int
    bound: np.ndarray | None = None
    d: int = 1

    @property
    def bound_bpd(self):
        if self.bound is None:
            return None
        return self.bound / (self.d * np.log(2.0))


def log_likelihood_joint(
    p: CldParams,
    score,
    x0,
    v0,
    cfg: OdeConfig = OdeConfig(),
    rng: np.random.Generator | None = None,
    divergence: str = "auto",
    t_start: float | None = None,
) -> LikelihoodResult:
    """Stochastic estimate of ``log p_eps(x0, v0)`` via the flow.

    ``(x0, v0)`` is treated as the state at ``t_start`` (default: the
    cutoff ``eps``). ``divergence`` is ``"exact"`` (score must provide
    ``with_divergence``), ``"hutchinson"`` or ``"auto"``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    n, d = x0.shape
    t0 = p.eps_cutoff if t_start is None else float(t_start)
    b, g, im = p.beta, p.gamma_fric, p.inv_mass
    if divergence == "auto":
        divergence = "exact" if hasattr(score, "with_divergence") else "hutchinson"
    if divergence == "exact":
        if not hasattr(score, "with_divergence"):
            raise ValueError("score has no exact divergence")
        probes = None
    elif divergence == "hutchinson":
        rng = rng if rng is not None else np.random.default_rng()
        # Probes stay fixed along the trajectory and only touch the velocity
        # block: the data block of the Jacobian has zero trace, and leaving
        # it out removes the large data-velocity cross terms from the variance.
        probes = _probes(rng, (cfg.hutchinson_probes, n, d), cfg.probe_dist)
    else:
        raise ValueError(f"unknown divergence mode {divergence!r}")
    k = 0 if probes is None else probes.shape[0]

    def rhs(t, y):
        x, v, _ = _unpack(y, n, d)
        dx = b * im * v
        if probes is None:
            s, div_s = score.with_divergence(x, v, t)
            dv = -b * x - g * b * im * v - g * b * s
            return _pack(dx, dv, -g * b * (div_s + d * im))
        h = cfg.fd_step * max(1.0, float(np.sqrt(np.mean(v * v))))
        xs = np.concatenate([x[None], np.broadcast_to(x, (2 * k, n, d))]).reshape(-1, d)
        vs = np.concatenate([v[None], v + h * probes, v - h * probes]).reshape(-1, d)
        ss = score(xs, vs, t).reshape(1 + 2 * k, n, d)
        dv = -b * x - g * b * im * v - g * b * ss[0]
        ds = np.sum(probes * (ss[1 : k + 1] - ss[k + 1 :]), -1) / (2 * h)
        div = -g * b * (ds.mean(0) + d * im)
        return _pack(dx, dv, div)

    y, nfe = rk45(rhs, _pack(x0, v0, np.zeros(n)), (t0, p.t_final), cfg)
    xT, vT, delta = _unpack(y, n, d)
    return LikelihoodResult(prior_logp(p, xT, vT) + delta, nfe, None, d)


def velocity_entropy(p: CldParams, d: int) -> float:
    return 0.5 * d * np.log(2 * np.pi * np.e * p.v0_var)


def nll_bound(
    p: CldParams,
    score,
    x0,
    n_v: int,
    cfg: OdeConfig = OdeConfig(),
    rng: np.random.Generator | None = None,
    v0=None,
    divergence: str = "auto",
) -> LikelihoodResult:
    """Upper bound on ``-log p(x0)`` per datum.

    ``v0`` may be passed as an (n_v, n, d) array to replace the random draws
    from N(0, gamma0*M).
    """
    if n_v < 1:
        raise ValueError("n_v must be >= 1")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n, d = x0.shape
    rng = rng if rng is not None else np.random.default_rng()
    if v0 is None:
        v0 = np.sqrt(p.v0_var) * rng.standard_normal((n_v, n, d))
    v0 = np.asarray(v0, dtype=float).reshape(n_v, n, d)
    xs = np.broadcast_to(x0, (n_v, n, d)).reshape(-1, d)
    res = log_likelihood_joint(p, score, xs, v0.reshape(-1, d), cfg, rng, divergence)
    lp = res.logp_joint.reshape(n_v, n)
    bound = -lp.mean(0) - velocity_entropy(p, d)
    return LikelihoodResult(lp, res.nfe, bound, d)


def likelihood_report(res: LikelihoodResult, n_v: int, seed: int) -> str:
    return json.dumps(
        {
            "logp_joint": float(np.mean(res.logp_joint)),
            "nll_bound_nats": None if res.bound is None else float(np.mean(res.bound)),
            "nll_bound_bpd": None if res.bound is None else float(np.mean(res.bound_bpd)),
            "nfe": int(res.nfe),
            "n_v": int(n_v),
            "seed": int(seed),
        },
        indent=2,
    )


def config_dict(cfg: OdeConfig) -> dict:
    return asdict(cfg)
