"""Acceptance criteria 1-10, one PASS/FAIL line each.

Every test records ``(criterion, passed, detail)`` and then asserts, so a
failing criterion still prints its measured values. Run this file directly
(``python tests/test_acceptance.py``) to get only the summary lines.
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))
from conftest import ACCEPTANCE_LINES  # noqa: E402

from cldlab.experiments import REFERENCE_NLL, build_and_train, run_analytical_table, run_damping, run_xi
from cldlab.kernels import (
    CldParams,
    dsm_kernel,
    forward_moments,
    hsm_kernel,
    moment_ode_rhs,
    sscs_half_moments,
)
from cldlab.mixtures import GaussianMixture, data_nll, nine_gaussians
from cldlab.objectives import (
    ImportanceModel,
    Weighting,
    cv_term_fid,
    cv_term_ml,
    dsm_loss,
    grad_variance_study,
    hsm_dsm_offset,
    hsm_loss,
    is_weight_mc,
    perturb,
)
from cldlab.probflow import OdeConfig, hutchinson_trace, nll_bound, probflow_sample
from cldlab.rng import make_rng
from cldlab.samplers import MixtureScore, make_schedule, sample_prior, sscs_run
from cldlab.scorenet import MixedScoreModel, Mlp, default_widths

# pinned tolerances
TABLE_REL, TABLE_ABS = 0.25, 1.0
FD_RESID = 1e-5
SEMIGROUP = 1e-8
EQUIL = 1e-6
N_SE = 3.0
OFFSET_T = (0.05, 0.1, 0.3, 0.5, 0.9)
OFFSET_DRAWS = 10**6
XI_GRID, XI_MC = 50, 10**5
GRADVAR_RATIO = 10.0
GRADVAR_T = (1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 1e-2, 0.05)
ODE_SDE_GAP = 0.1
MODE_MASS = 0.03
GRAD_REL = 1e-4

MIX = nine_gaussians()


def record(name, ok, detail):
    ACCEPTANCE_LINES.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def _cov(k):
    return np.array([[k.sxx, k.sxv], [k.sxv, k.svv]], dtype=float)


# --- 1 ------------------------------------------------------------------------------


def test_c01_analytical_table():
    res = run_analytical_table({"seed": 0, "n_samples": 100_000, "schedule": "uniform"})
    nll = {(r[0], r[1]): r[2] for r in res.rows}
    bad = []
    for key, ref in REFERENCE_NLL.items():
        if abs(nll[key] - ref) > max(TABLE_REL * abs(ref), TABLE_ABS):
            bad.append(f"{key[0]}@{key[1]}={nll[key]:.2f} vs {ref}")
    order = all(nll[("cld_sscs", n)] < nll[("cld_em", n)] for n in (20, 50, 100))
    cells = ", ".join(f"{k[0]}@{k[1]}={v:.2f}" for k, v in sorted(nll.items()))
    ok = not bad and order
    record("01 analytical-score NLL table", ok,
           f"12 cells within max(25%,1): {not bad} {bad}; SSCS<EM for n<=100: {order}; {cells}")
    assert ok


# --- 2 ------------------------------------------------------------------------------


def _fd_max(fn, rhs_fn, t, h=1e-5):
    kp, km, k = fn(t + h), fn(t - h), fn(t)
    dmu_fd = (kp.mu_coeff - km.mu_coeff) / (2 * h)
    dcov_fd = (_cov(kp) - _cov(km)) / (2 * h)
    dmu, dcov = rhs_fn(k)
    return max(np.abs(dmu_fd - dmu).max(), np.abs(dcov_fd - dcov).max())


def test_c02_kernels():
    p = CldParams()
    rng = make_rng(0, "acceptance", "kernels")

    def fwd_rhs(k, reverse=False):
        dmu, _ = moment_ode_rhs(p, k.mu_coeff.T, np.zeros((2, 2)), reverse)
        _, dcov = moment_ode_rhs(p, np.zeros(2), _cov(k), reverse)
        return dmu.T, dcov

    res = {"hsm": [], "dsm": [], "sscs": []}
    for _ in range(20):
        t = rng.uniform(0.01, 0.98)
        res["hsm"].append(_fd_max(lambda s: hsm_kernel(p, s), fwd_rhs, t))
        res["dsm"].append(_fd_max(lambda s: dsm_kernel(p, s), fwd_rhs, t))
        h = rng.uniform(0.001, 0.2)
        res["sscs"].append(_fd_max(lambda s: sscs_half_moments(p, s), lambda k: fwd_rhs(k, True), h))
    fd = {k: max(v) for k, v in res.items()}

    semi = 0.0
    for _ in range(20):
        t1, t2 = rng.uniform(0, 0.5, 2)
        s0xx, s0vv = rng.uniform(0, 1, 2)
        a = forward_moments(p, t1, s0xx, s0vv)
        b = forward_moments(p, t2, 0.0, 0.0)
        c = forward_moments(p, t1 + t2, s0xx, s0vv)
        comp = b.mu_coeff @ _cov(a) @ b.mu_coeff.T + _cov(b)
        semi = max(semi, np.abs(b.mu_coeff @ a.mu_coeff - c.mu_coeff).max(), np.abs(comp - _cov(c)).max())

    t_eq = 10.0 / p.beta
    pl = CldParams(t_final=t_eq)
    k = forward_moments(pl, t_eq, 0.0, pl.v0_var)
    eq = max(abs(k.sxx - 1), abs(k.sxv), abs(k.svv - pl.mass))

    ok = max(fd.values()) < FD_RESID and semi < SEMIGROUP and eq < EQUIL
    record("02 kernel correctness", ok,
           f"FD residual hsm={fd['hsm']:.1e} dsm={fd['dsm']:.1e} sscs={fd['sscs']:.1e} (<{FD_RESID:g}); "
           f"semigroup={semi:.1e} (<{SEMIGROUP:g}); equilibrium@beta*t=10={eq:.1e} (<{EQUIL:g})")
    assert ok


# --- 3 ------------------------------------------------------------------------------


def test_c03_hsm_dsm_offset():
    p = CldParams()
    score = MixtureScore(MIX, p)
    w = Weighting("unit")
    zs = []
    for t in OFFSET_T:
        rng = make_rng(0, "acceptance", "offset", int(t * 1000))
        lh = hsm_loss(score, p, MIX.sample(OFFSET_DRAWS, rng), t, w, rng).loss
        ld = dsm_loss(score, p, MIX.sample(OFFSET_DRAWS, rng), t, w, rng).loss
        se = np.sqrt(lh.var() / OFFSET_DRAWS + ld.var() / OFFSET_DRAWS)
        zs.append((lh.mean() - ld.mean() - float(hsm_dsm_offset(p, t, MIX.d))) / se)
    ok = all(abs(z) < N_SE for z in zs)
    record("03 HSM-DSM offset identity", ok,
           "z-scores " + ", ".join(f"t={t:g}:{z:+.2f}" for t, z in zip(OFFSET_T, zs)) + f" (|z|<{N_SE:g})")
    assert ok


# --- 4 ------------------------------------------------------------------------------


def test_c04_control_variates():
    p = CldParams()
    d = MIX.d
    # linear test model: alpha = W (x, v, t) + b
    net = Mlp([2 * d + 1, d], make_rng(0, "acceptance", "cv", "init"))
    model = MixedScoreModel(net, p, "raw")
    zs_mean = []
    for t in (0.05, 0.5):
        rng = make_rng(0, "acceptance", "cv", int(t * 100))
        n = 400_000
        x, v, eps, mx, mv, l = perturb(p, MIX.sample(n, rng), t, "hsm", rng)
        a_mu = model.alpha(mx, mv, t)
        cf = cv_term_fid(eps, a_mu)
        cm = cv_term_ml(eps, a_mu, l)
        zs_mean.append((cf.mean() - d) / (cf.std() / np.sqrt(n)))
        zs_mean.append((cm.mean() - l[0] ** 2 * d) / (cm.std() / np.sqrt(n)))

    w = Weighting("ml")
    grad_z, ratios = [], []
    for t in (0.05, 0.5):
        rng = make_rng(0, "acceptance", "cv", "grad", int(t * 100))
        plain, cv = [], []
        for _ in range(4000):
            x0 = MIX.sample(1, rng)
            seed = int(rng.integers(2**31))
            plain.append(np.concatenate([g.ravel() for g in model.loss_and_grad(x0, t, w, np.random.default_rng(seed))[1]]))
            cv.append(np.concatenate([g.ravel() for g in model.loss_and_grad(
                x0, t, w, np.random.default_rng(seed), control_variate=True)[1]]))
        plain, cv = np.array(plain), np.array(cv)
        diff = cv - plain
        se = diff.std(0) / np.sqrt(len(diff))
        mask = se > 0
        grad_z.append(float(np.max(np.abs(diff.mean(0)[mask]) / se[mask])))
        ratios.append(cv.var(0).sum() / plain.var(0).sum())
    n_coord = plain.shape[1]
    ok = all(abs(z) < N_SE for z in zs_mean) and all(z < N_SE for z in grad_z)
    record("04 control variates", ok,
           "E[C_FID]=d, E[C_ML]=l^2 d z-scores " + ", ".join(f"{z:+.2f}" for z in zs_mean)
           + f"; gradient agreement max|z| {grad_z[0]:.2f}, {grad_z[1]:.2f} over {n_coord} coords"
           + f"; gradient variance ratio cv/plain t=0.05:{ratios[0]:.3f} t=0.5:{ratios[1]:.3f}")
    assert ok


# --- 5 ------------------------------------------------------------------------------


def test_c05_importance_weights():
    p = CldParams()
    zs = []
    for cond in ("dsm", "hsm"):
        im = ImportanceModel(p, cond)
        for t in (0.1, 0.5, 0.9):
            w = im.weights(t, MIX.d)
            ml, se_ml, mlc, se_mlc = is_weight_mc(im, t, MIX.d, 10**6, make_rng(0, "acceptance", "is", cond, int(t * 10)))
            zs += [(ml - float(w["ml"])) / se_ml, (mlc - float(w["mlc"])) / se_mlc]
    sb = ImportanceModel(CldParams(gamma0=1.0)).sigma_bar(np.linspace(0, 1, 101))
    dev = float(np.abs(sb - np.diag([1.0, 0.25])).max())
    ok = all(abs(z) < N_SE for z in zs) and dev < 1e-12
    record("05 importance-sampling weights", ok,
           f"ML/MLC vs MC max|z|={max(abs(z) for z in zs):.2f} (<{N_SE:g}; FID/FIDC are exact rescalings); "
           f"gamma=1 Sigma_bar deviation={dev:.1e}")
    assert ok


# --- 6 ------------------------------------------------------------------------------


def test_c06_xi_ordering():
    res = run_xi({"seed": 0, "n_mc": XI_MC, "n_grid": XI_GRID})
    n_ord = res.metrics["n_ordered"]
    ok = n_ord == XI_GRID
    worst = min(res.rows, key=lambda r: r[2] - r[1])
    record("06 xi ordering", ok,
           f"xi_cld < xi_vpsde at {n_ord}/{XI_GRID} points, {XI_MC} samples, beta=8, M=gamma=1; "
           f"tightest t={worst[0]:.3g}: {worst[1]:.4g} vs {worst[2]:.4g}")
    assert ok


# --- 7 ------------------------------------------------------------------------------


def test_c07_gradient_variance():
    p = CldParams(gamma0=1.0)
    model = MixedScoreModel(Mlp(default_widths(MIX.d), make_rng(0, "acceptance", "gradvar", "init")), p)
    th, td = grad_variance_study(model, MIX, p, GRADVAR_T, 50_000, make_rng(0, "acceptance", "gradvar"))
    ratio = td / th
    p4 = CldParams()
    th4, _ = grad_variance_study(model, MIX, p4, GRADVAR_T, 50_000, make_rng(0, "acceptance", "gradvar", 4))
    hsm_close = bool(np.all(np.maximum(th / th4, th4 / th) < 2.0))
    ok = bool(np.all(ratio > GRADVAR_RATIO))
    record("07 gradient variance DSM/HSM", ok,
           "ratio " + ", ".join(f"t={t:g}:{r:.3g}" for t, r in zip(GRADVAR_T, ratio))
           + f" (need >{GRADVAR_RATIO:g} for all t<=0.05, gamma=1, fixed random model); "
           f"HSM gamma=0.04 vs 1 within 2x: {hsm_close}")
    assert ok


# --- 8 ------------------------------------------------------------------------------


def test_c08_damping():
    res = run_damping({"seed": 0})
    rows = {r[1]: r for r in res.rows}
    t_eq = {f: r[3] for f, r in rows.items()}
    crit_best = min(t_eq, key=t_eq.get) == 1.0
    under_osc = bool(rows[0.25][6])
    ok = crit_best and under_osc
    record("08 damping optimality", ok,
           "t_eq " + ", ".join(f"G^2/4M={f:g}:{v:.3f}" for f, v in sorted(t_eq.items()))
           + f"; critical fastest: {crit_best}; underdamped ACF sign change: {under_osc} (min {rows[0.25][5]:.3f})")
    assert ok


# --- 9 ------------------------------------------------------------------------------


def test_c09_probability_flow():
    rng = make_rng(0, "acceptance", "hutchinson")
    a = rng.standard_normal((4, 4))
    u = rng.standard_normal((5, 4))
    est = hutchinson_trace(lambda z: z @ a.T, u, 20_000, rng)
    z_h = float(np.max(np.abs(est.mean(0) - np.trace(a)) / (est.std(0) / np.sqrt(est.shape[0]))))

    p = CldParams()
    score = MixtureScore(MIX, p)
    n = 20_000
    prior = sample_prior(p, n, MIX.d, make_rng(0, "acceptance", "odesde", "prior"))
    ode, nfe = probflow_sample(p, score, prior, OdeConfig())
    sde = sscs_run(p, score, prior, make_schedule("quadratic", 500), make_rng(0, "acceptance", "odesde", "sscs"))
    nll_ode, nll_sde = data_nll(MIX, ode.x), data_nll(MIX, sde.x)
    gap = abs(nll_ode - nll_sde)

    pg = CldParams(t_final=3.0)
    g = GaussianMixture(np.ones(1), np.array([[0.3, -0.4]]), 0.5)
    x = g.sample(20, make_rng(0, "acceptance", "slack"))
    from scipy.stats import norm

    q = norm.ppf((np.arange(16) + 0.5) / 16)
    v0 = np.sqrt(pg.v0_var) * np.broadcast_to(q[:, None, None], (16, 20, 2)).copy()
    v0[..., 1] = v0[::-1, :, 1]
    b = nll_bound(pg, MixtureScore(g, pg), x, 16, OdeConfig(rtol=1e-8, atol=1e-8), v0=v0, divergence="exact")
    slack = b.bound + g.log_prob(x)

    ok = z_h < N_SE and gap < ODE_SDE_GAP and bool(np.all(slack >= 0))
    record("09 probability-flow machinery", ok,
           f"Hutchinson max|z|={z_h:.2f}; ODE NLL {nll_ode:.3f} ({nfe} NFE) vs SSCS-500 quadratic {nll_sde:.3f}, "
           f"gap {gap:.3f} (<{ODE_SDE_GAP:g}); Gaussian bound slack min {slack.min():.2e} (>=0)")
    assert ok


# --- 10 -----------------------------------------------------------------------------


def _grad_check():
    p = CldParams()
    model = MixedScoreModel(Mlp(default_widths(2, (6, 6)), make_rng(0, "acceptance", "gc")), p)
    x0 = MIX.sample(8, make_rng(0, "acceptance", "gc", "data"))
    t = make_rng(0, "acceptance", "gc", "t").uniform(0.01, 1.0, 8)
    w = Weighting("reweighted")
    f = lambda: model.loss_and_grad(x0, t, w, np.random.default_rng(1))
    _, grads, _ = f()
    worst = 0.0
    h = 1e-6
    for i, q in enumerate(model.net.params):
        for j in range(q.size):
            old = q.flat[j]
            q.flat[j] = old + h
            lp = f()[0]
            q.flat[j] = old - h
            lm = f()[0]
            q.flat[j] = old
            fd = (lp - lm) / (2 * h)
            g = grads[i].flat[j]
            worst = max(worst, abs(g - fd) / max(abs(fd), abs(g), 1e-6))
    return worst


def test_c10_trained_model_end_to_end():
    cfg = {"seed": 0, "iters": 20_000, "batch": 512, "lr": 1e-3, "warmup": 1000, "ema": 0.999,
           "weighting": "reweighted", "objective": "hsm", "log_every": 0}
    _, ema_model, out, mix = build_and_train(cfg)
    p = ema_model.p
    prior = sample_prior(p, 20_000, mix.d, make_rng(0, "acceptance", "e2e", "prior"))
    xs = sscs_run(p, ema_model, prior, make_schedule("quadratic", 275), make_rng(0, "acceptance", "e2e", "sscs")).x
    dist = np.linalg.norm(xs[:, None, :] - mix.means[None], axis=-1)
    mass = np.mean(dist < 3 * mix.sigma, axis=0)
    gc = _grad_check()
    ok = bool(np.all(mass >= MODE_MASS)) and gc < GRAD_REL and bool(np.all(np.isfinite(out.losses)))
    record("10 learned model end-to-end", ok,
           "mode mass within 3 sigma " + " ".join(f"{m:.3f}" for m in mass)
           + f" (each >={MODE_MASS:g}); gradient check max rel err {gc:.1e} (<{GRAD_REL:g}); "
           f"20k iters, lr 1e-3, EMA 0.999")
    assert ok


if __name__ == "__main__":
    fns = [v for k, v in sorted(globals().items()) if k.startswith("test_c")]
    for fn in fns:
        try:
            fn()
        except AssertionError:
            pass
    sys.exit(0 if all(ok for _, ok, _ in ACCEPTANCE_LINES) else 1)
