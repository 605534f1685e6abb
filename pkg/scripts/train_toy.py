"""Train the mixed-score MLP on nine_gaussians, then sample it and report mode coverage.

Defaults are the short run used for acceptance; pass e.g. ``--iters 200000``
for the long schedule.
"""
import argparse

import numpy as np

from cldlab.experiments import build_and_train
from cldlab.mixtures import data_nll
from cldlab.rng import make_rng
from cldlab.samplers import make_schedule, sample_prior, sscs_run
from cldlab.scorenet import save_checkpoint

from _common import OUT

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=20_000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--warmup", type=int, default=1000)
    ap.add_argument("--ema", type=float, default=0.999)
    ap.add_argument("--steps", type=int, default=275)
    a = ap.parse_args()
    cfg = {"seed": a.seed, "iters": a.iters, "lr": a.lr, "warmup": a.warmup, "ema": a.ema, "log_every": 0}
    _, model, out, mix = build_and_train(cfg)
    OUT.mkdir(exist_ok=True)
    save_checkpoint(OUT / "toy.ckpt", model, a.iters)
    prior = sample_prior(model.p, 20_000, mix.d, make_rng(a.seed, "script", "prior"))
    x = sscs_run(model.p, model, prior, make_schedule("quadratic", a.steps), make_rng(a.seed, "script", "sscs")).x
    mass = np.mean(np.linalg.norm(x[:, None] - mix.means[None], axis=-1) < 3 * mix.sigma, axis=0)
    print(f"final loss {out.losses[-1000:].mean():.4f}")
    print("mode mass", np.round(mass, 3))
    print(f"sample NLL {data_nll(mix, x):.3f}")
