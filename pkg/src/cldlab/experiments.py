"""Experiment runners behind the command line.

Each runner takes a plain config dict and returns an :class:`ExperimentResult`
holding a table plus scalar metrics. Random streams are derived from
``(seed, experiment, name, ...)`` so every cell is reproducible on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import CldParams
from .mixtures import VpsdeParams, data_nll, nine_gaussians, standard_normal, xi_experiment
from .objectives import ImportanceModel, grad_variance_study
from .probflow import OdeConfig, nll_bound, probflow_sample
from .rng import make_rng
from .samplers import (
    MixtureScore,
    VpsdeMixtureScore,
    autocorrelation,
    em_run_cld,
    exact_moment_distance,
    forward_trajectories,
    has_sign_change,
    langevin_moments,
    make_schedule,
    sample_prior,
    sscs_run,
    time_to_equilibrium,
    vpsde_em_run,
)
from .scorenet import (
    MixedScoreModel,
    Mlp,
    TrainConfig,
    default_widths,
    jacobian_frobenius,
    load_checkpoint,
    train,
    with_params,
)


@dataclass
class ExperimentResult:
    columns: list
    rows: list
    metrics: dict = field(default_factory=dict)
    streams: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)


def cld_params(cfg) -> CldParams:
    return CldParams(
        beta=float(cfg.get("beta", 4.0)),
        gamma_fric=float(cfg.get("gamma_fric", 1.0)),
        gamma0=float(cfg.get("gamma0", 0.04)),
        t_final=float(cfg.get("t_final", 1.0)),
        eps_cutoff=float(cfg.get("eps", 1e-3)),
        eps_num=float(cfg.get("eps_num", 1e-9)),
    )


def _dataset(name: str):
    if name == "nine_gaussians":
        return nine_gaussians()
    if name == "normal":
        return standard_normal(2)
    raise ValueError(f"unknown dataset {name!r}")


REFERENCE_NLL = {
    ("cld_em", 20): 60.6, ("cld_em", 50): 9.71, ("cld_em", 100): 0.72, ("cld_em", 200): -1.04,
    ("cld_sscs", 20): 10.5, ("cld_sscs", 50): 1.55, ("cld_sscs", 100): -1.25, ("cld_sscs", 200): -1.54,
    ("vpsde_em", 20): 14.2, ("vpsde_em", 50): 4.68, ("vpsde_em", 100): -0.35, ("vpsde_em", 200): -1.11,
}


def run_analytical_table(cfg) -> ExperimentResult:
    """Sample NLL with exact mixture scores for every sampler and step count."""
    seed = int(cfg["seed"])
    p = cld_params(cfg)
    vp = VpsdeParams(eps_cutoff=p.eps_cutoff)
    mix = nine_gaussians()
    n = int(cfg.get("n_samples", 100_000))
    kind = cfg.get("schedule", "uniform")
    steps = [int(s) for s in cfg.get("steps", [20, 50, 100, 200])]
    cld_score, vp_score = MixtureScore(mix, p), VpsdeMixtureScore(mix, vp)
    res = ExperimentResult(["sampler", "n_steps", "nll", "reference", "schedule", "n_samples"], [])
    for n_steps in steps:
        sched = make_schedule(kind, n_steps, p.t_final, p.eps_cutoff)
        prior = sample_prior(p, n, mix.d, make_rng(seed, "table", "prior", n_steps))
        em = em_run_cld(p, cld_score, prior, sched, make_rng(seed, "table", "cld_em", n_steps))
        ss = sscs_run(p, cld_score, prior, sched, make_rng(seed, "table", "cld_sscs", n_steps))
        x_vp = make_rng(seed, "table", "vp_prior", n_steps).standard_normal((n, mix.d))
        vpx = vpsde_em_run(vp, vp_score, x_vp, sched, make_rng(seed, "table", "vpsde_em", n_steps))
        for name, x in (("cld_em", em.x), ("cld_sscs", ss.x), ("vpsde_em", vpx)):
            nll = data_nll(mix, x)
            res.rows.append([name, n_steps, nll, REFERENCE_NLL.get((name, n_steps), ""), kind, n])
            res.metrics[f"{name}_{n_steps}"] = nll
        res.streams += [f"table/{s}/{n_steps}" for s in ("prior", "cld_em", "cld_sscs", "vp_prior", "vpsde_em")]
    return res


def run_xi(cfg) -> ExperimentResult:
    seed = int(cfg["seed"])
    n_mc = int(cfg.get("n_mc", 100_000))
    grid = np.linspace(float(cfg.get("t_min", 1e-5)), 1.0, int(cfg.get("n_grid", 50)))
    p = CldParams(beta=float(cfg.get("beta", 8.0)), gamma_fric=2.0, gamma0=1.0)
    xc, xv, sc, sv = xi_experiment(nine_gaussians(), grid, n_mc, make_rng(seed, "xi"), p)
    res = ExperimentResult(["t", "xi_cld", "xi_vpsde", "n_mc", "seed"], [])
    for i, t in enumerate(grid):
        res.rows.append([t, xc[i], xv[i], n_mc, seed])
    res.metrics = {
        "n_grid": len(grid),
        "n_ordered": int(np.sum(xc < xv)),
        "max_se_cld": float(sc.max()),
        "max_se_vpsde": float(sv.max()),
    }
    res.streams = ["xi"]
    return res


def run_damping(cfg) -> ExperimentResult:
    """Time to equilibrium and oscillation for several frictions at fixed M."""
    seed = int(cfg["seed"])
    beta = float(cfg.get("beta", 4.0))
    mass = float(cfg.get("mass", 0.25))
    factors = [float(f) for f in cfg.get("factors", [0.25, 1.0, 16.0, 256.0])]
    horizon = float(cfg.get("beta_t_max", 50.0)) / beta
    tol = float(cfg.get("tol", 0.05))
    n_paths = int(cfg.get("n_paths", 2000))
    mix = nine_gaussians()
    ex2 = float(np.mean(mix.means[:, 0] ** 2) + mix.sigma**2)
    s0 = np.diag([ex2, float(cfg.get("gamma0", 0.04)) * mass])
    res = ExperimentResult(
        ["gamma_fric", "gamma_sq_over_4m", "regime", "t_eq", "final_distance", "acf_min", "acf_sign_change"], []
    )
    for fac in factors:
        g = float(np.sqrt(fac * 4 * mass))
        regime = "critical" if fac == 1.0 else ("under" if fac < 1.0 else "over")
        ts, m, c = langevin_moments(beta, g, mass, np.zeros(2), s0, horizon, int(cfg.get("n_grid", 12500)))
        dist = exact_moment_distance(m, c, mass)
        t_eq = time_to_equilibrium(ts, dist, tol)
        # stationary paths for the oscillation check; step scaled to the stiffness
        rng = make_rng(seed, "damping", int(round(fac * 1000)))
        dt = min(1e-3, 0.02 / (g * beta / mass))
        t_acf = float(cfg.get("acf_horizon", 4.0))
        n_steps = int(np.ceil(t_acf / dt))
        rec = max(1, int(round(0.01 / dt)))
        x0 = rng.standard_normal((n_paths, 1))
        v0 = np.sqrt(mass) * rng.standard_normal((n_paths, 1))
        _, xs, _ = forward_trajectories(beta, g, mass, x0, v0, n_steps, t_acf, rng, rec)
        acf = autocorrelation(xs[:, :, 0], min(100, xs.shape[0] - 1))
        res.rows.append([g, fac, regime, t_eq, dist[-1], acf.min(), has_sign_change(acf)])
        res.metrics[f"t_eq_{regime}_{fac:g}"] = t_eq
        res.streams.append(f"damping/{int(round(fac * 1000))}")
    return res


def run_gradvar(cfg) -> ExperimentResult:
    seed = int(cfg["seed"])
    n_mc = int(cfg.get("n_mc", 50_000))
    grid = [float(t) for t in cfg.get("t_grid", [1e-5, 3e-5, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.5, 1.0])]
    gammas = [float(g) for g in cfg.get("gammas", [0.04, 1.0])]
    mix = nine_gaussians()
    res = ExperimentResult(["t", "trace_hsm", "trace_dsm", "gamma", "n_mc", "seed"], [])
    for g in gammas:
        p = cld_params({**cfg, "gamma0": g})
        th, td = grad_variance_study(MixtureScore(mix, p), mix, p, grid, n_mc, make_rng(seed, "gradvar", int(g * 1e4)))
        for t, a, b in zip(grid, th, td):
            res.rows.append([t, a, b, g, n_mc, seed])
        res.streams.append(f"gradvar/{g}")
    return res


def run_isweights(cfg) -> ExperimentResult:
    p = cld_params(cfg)
    d = int(cfg.get("d", 2))
    grid = np.linspace(float(cfg.get("t_cut", 1e-5)), p.t_final, int(cfg.get("n_grid", 256)))
    im = ImportanceModel(p, cfg.get("conditioning", "dsm"))
    w = im.weights(grid, d, cfg.get("form", "exact"))
    res = ExperimentResult(["t", "ml", "fid", "mlc", "fidc"], [])
    for i, t in enumerate(grid):
        res.rows.append([t, w["ml"][i], w["fid"][i], w["mlc"][i], w["fidc"][i]])
    res.metrics = {k: bool(np.all(np.isfinite(v))) for k, v in w.items()}
    res.metrics = {f"{k}_finite": v for k, v in res.metrics.items()}
    return res


def train_config(cfg) -> TrainConfig:
    return TrainConfig(
        n_iters=int(cfg.get("iters", 200_000)),
        batch=int(cfg.get("batch", 512)),
        lr=float(cfg.get("lr", 2e-4)),
        warmup=int(cfg.get("warmup", 10_000)),
        ema_rate=float(cfg.get("ema", 0.9999)),
        weighting=cfg.get("weighting", "reweighted"),
        kind=cfg.get("objective", "hsm"),
        mode=cfg.get("mode", "mixed"),
        log_every=int(cfg.get("log_every", 1000)),
        hidden=tuple(int(h) for h in cfg.get("hidden", (128, 128, 128))),
    )


def build_and_train(cfg, mode=None):
    seed = int(cfg["seed"])
    p = cld_params(cfg)
    mix = _dataset(cfg.get("dataset", "nine_gaussians"))
    tc = train_config(cfg)
    if mode is not None:
        tc.mode = mode
    net = Mlp(default_widths(mix.d, tc.hidden), make_rng(seed, "init", tc.mode))
    model = MixedScoreModel(net, p, tc.mode)
    out = train(model, mix, tc, make_rng(seed, "train", tc.mode))
    return model, with_params(model, out.ema), out, mix


def run_train(cfg) -> ExperimentResult:
    model, ema_model, out, _ = build_and_train(cfg)
    every = max(1, len(out.losses) // 1000)
    res = ExperimentResult(["step", "loss", "grad_norm"], [])
    for i in range(0, len(out.losses), every):
        res.rows.append([i + 1, out.losses[i], out.grad_norms[i]])
    tail = out.losses[-max(1, len(out.losses) // 20) :]
    res.metrics = {
        "final_loss": float(tail.mean()),
        "max_grad_norm": float(out.grad_norms.max()),
        "n_params": model.net.n_params,
    }
    res.artifacts = {"model": ema_model, "step": len(out.losses)}
    res.streams = ["init", "train"]
    return res


def run_jacobian(cfg) -> ExperimentResult:
    seed = int(cfg["seed"])
    grid = np.linspace(0.01, 1.0, int(cfg.get("n_grid", 20)))
    n_mc = int(cfg.get("n_mc", 2000))
    res = ExperimentResult(["t", "jf_mixed", "jf_raw"], [])
    curves = {}
    for mode in ("mixed", "raw"):
        _, ema_model, _, mix = build_and_train(cfg, mode)
        curves[mode] = jacobian_frobenius(ema_model, mix, ema_model.p, grid, n_mc, make_rng(seed, "jacobian", mode))
    for i, t in enumerate(grid):
        res.rows.append([t, curves["mixed"][i], curves["raw"][i]])
    res.metrics = {"frac_mixed_lower": float(np.mean(curves["mixed"] < curves["raw"]))}
    res.streams = ["init", "train", "jacobian"]
    return res


def _score_source(cfg, p, mix):
    ckpt = cfg.get("checkpoint")
    if ckpt:
        model, _ = load_checkpoint(ckpt)
        return model, model.p
    return MixtureScore(mix, p), p


def run_sample(cfg) -> ExperimentResult:
    seed = int(cfg["seed"])
    mix = _dataset(cfg.get("dataset", "nine_gaussians"))
    score, p = _score_source(cfg, cld_params(cfg), mix)
    n = int(cfg.get("n", 10_000))
    sampler = cfg.get("sampler", "sscs")
    prior = sample_prior(p, n, mix.d, make_rng(seed, "sample", "prior"))
    rng = make_rng(seed, "sample", sampler)
    dv = bool(cfg.get("denoise_velocity", False))
    nfe = None
    if sampler == "ode":
        out, nfe = probflow_sample(p, score, prior, OdeConfig(float(cfg.get("rtol", 1e-5)), float(cfg.get("atol", 1e-5))))
    else:
        sched = make_schedule(cfg.get("schedule", "quadratic"), int(cfg.get("steps", 275)), p.t_final, p.eps_cutoff)
        if sampler == "sscs":
            out = sscs_run(p, score, prior, sched, rng, denoise_velocity=dv)
        elif sampler == "em":
            out = em_run_cld(p, score, prior, sched, rng, denoise_velocity=dv)
        else:
            raise ValueError(f"unknown sampler {sampler!r}")
    cols = [f"x_{i}" for i in range(mix.d)] + [f"v_{i}" for i in range(mix.d)]
    rows = np.concatenate([out.x, out.v], 1).tolist()
    res = ExperimentResult(cols, rows)
    res.metrics = {"data_nll": data_nll(mix, out.x), "nfe": nfe if nfe is not None else int(cfg.get("steps", 275))}
    res.artifacts = {"x": out.x, "v": out.v}
    res.streams = ["sample/prior", f"sample/{sampler}"]
    return res


def run_likelihood(cfg) -> ExperimentResult:
    seed = int(cfg["seed"])
    mix = _dataset(cfg.get("dataset", "nine_gaussians"))
    score, p = _score_source(cfg, cld_params(cfg), mix)
    n_data = int(cfg.get("n_data", 200))
    n_v = int(cfg.get("n_v", 10))
    x0 = mix.sample(n_data, make_rng(seed, "likelihood", "data"))
    ode = OdeConfig(float(cfg.get("rtol", 1e-5)), float(cfg.get("atol", 1e-5)), hutchinson_probes=int(cfg.get("probes", 1)))
    r = nll_bound(p, score, x0, n_v, ode, make_rng(seed, "likelihood", "v0"))
    res = ExperimentResult(["datum", "nll_bound_nats", "nll_bound_bpd", "data_nll"], [])
    true_nll = -mix.log_prob(x0)
    for i in range(n_data):
        res.rows.append([i, r.bound[i], r.bound_bpd[i], true_nll[i]])
    res.metrics = {
        "logp_joint": float(np.mean(r.logp_joint)),
        "nll_bound_nats": float(np.mean(r.bound)),
        "nll_bound_bpd": float(np.mean(r.bound_bpd)),
        "data_nll": float(np.mean(true_nll)),
        "nfe": int(r.nfe),
        "n_v": n_v,
        "seed": seed,
    }
    res.streams = ["likelihood/data", "likelihood/v0"]
    return res


RUNNERS = {
    "analytical-table": run_analytical_table,
    "xi": run_xi,
    "jacobian": run_jacobian,
    "damping": run_damping,
    "gradvar": run_gradvar,
    "train": run_train,
    "sample": run_sample,
    "likelihood": run_likelihood,
    "isweights": run_isweights,
}
