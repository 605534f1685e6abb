"""Small numpy score network with hand-written backpropagation.

The network predicts the residual ``alpha'`` of the noise target. In mixed
mode the score is ``-v/Sigma_vv - ell * alpha'`` where both coefficients come
from the HSM kernel, so an untrained net already gives the Normal score of
the diffused velocity.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import CldParams, ell, hsm_kernel
from .mixtures import GaussianMixture
from .objectives import Weighting, perturb

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CLDNET01"


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


class Mlp:
    """Fully connected net, SiLU between layers, linear output."""

    def __init__(self, widths, rng: np.random.Generator | None = None, zero=False):
        self.widths = list(widths)
        self.params = []
        rng = rng or np.random.default_rng(0)
        n_layers = len(self.widths) - 1
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if zero:
                w = np.zeros((a, b))
            else:
                scale = np.sqrt(1.0 / a) * (0.1 if i == n_layers - 1 else 1.0)
                w = scale * rng.standard_normal((a, b))
            self.params += [w, np.zeros(b)]

    @property
    def n_params(self) -> int:
        return sum(q.size for q in self.params)

    def forward(self, h):
        h = np.asarray(h, dtype=float)
        if h.shape[-1] != self.widths[0]:
            raise ValueError(f"expected input width {self.widths[0]}, got {h.shape[-1]}")
        cache = [h]
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ w + b
            if i < n_layers - 1:
                cache.append(z)
                h = silu(z)
            else:
                h = z
        return h, cache

    def __call__(self, h):
        return self.forward(h)[0]

    def backward(self, cache, g_out):
        """Return ``(param_grads, input_grad)`` for the upstream ``g_out``."""
        n_layers = len(self.params) // 2
        grads = [None] * len(self.params)
        g = g_out
        for i in reversed(range(n_layers)):
            z_prev = cache[i] if i > 0 else None
            a_prev = cache[0] if i == 0 else silu(z_prev)
            grads[2 * i] = a_prev.T @ g
            grads[2 * i + 1] = g.sum(0)
            g = g @ self.params[2 * i].T
            if i > 0:
                g = g * silu_grad(z_prev)
        return grads, g

    def get_flat(self):
        return np.concatenate([q.ravel() for q in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError("flat parameter vector has the wrong size")
        off = 0
        for i, q in enumerate(self.params):
            self.params[i] = flat[off : off + q.size].reshape(q.shape).copy()
            off += q.size

    def copy(self):
        m = Mlp.__new__(Mlp)
        m.widths = list(self.widths)
        m.params = [q.copy() for q in self.params]
        return m


def default_widths(d: int, hidden=(128, 128, 128)):
    return [2 * d + 1, *hidden, d]


class MixedScoreModel:
    """Score model ``s(x, v, t)`` built on an :class:`Mlp` residual."""

    def __init__(self, net: Mlp, p: CldParams, mode: str = "mixed"):
        if mode not in ("mixed", "raw"):
            raise ValueError("mode must be 'mixed' or 'raw'")
        self.net = net
        self.p = p
        self.mode = mode
        self.d = net.widths[-1]
        if net.widths[0] != 2 * self.d + 1:
            raise ValueError("net input must be (x, v, t)")

    def _coeffs(self, t, n):
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        k = hsm_kernel(self.p, t)
        return t, ell(k, self.p.eps_num)[:, None], (k.svv + self.p.eps_num)[:, None]

    def features(self, x, v, t):
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        return np.concatenate([x, v, (t / self.p.t_final)[:, None]], 1)

    def alpha(self, x, v, t, return_cache=False):
        x = np.atleast_2d(x)
        v = np.atleast_2d(v)
        t, l, svv = self._coeffs(t, x.shape[0])
        ap, cache = self.net.forward(self.features(x, v, t))
        a = ap + v / (l * svv) if self.mode == "mixed" else ap
        return (a, ap, cache, l) if return_cache else a

    def __call__(self, x, v, t):
        a, _, _, l = self.alpha(x, v, t, return_cache=True)
        return -l * a

    def loss_and_grad(self, x0, t, w: Weighting, rng, kind="hsm", control_variate=False):
        """Mean ``lambda*ell^2*||eps_v - alpha||^2`` and its parameter gradients.

        With ``control_variate`` the loss is
        ``lambda*ell^2*(||alpha(u)||^2 - 2 eps.(alpha(u) - alpha(mu)))``, which
        has the same expected gradient.
        """
        x, v, eps_v, mu_x, mu_v, l_k = perturb(self.p, x0, t, kind, rng)
        a, _, cache, _ = self.alpha(x, v, t, return_cache=True)
        coef = (w(self.p, t, l_k) * l_k**2)[:, None]
        n = x.shape[0]
        if not control_variate:
            r = a - eps_v
            per = np.sum(coef * r * r, -1)
            grads, _ = self.net.backward(cache, 2.0 * coef * r / n)
            return per.mean(), grads, per
        a_mu, _, cache_mu, _ = self.alpha(mu_x, mu_v, t, return_cache=True)
        per = np.sum(coef * (a * a - 2 * eps_v * (a - a_mu)), -1)
        g_u, _ = self.net.backward(cache, 2.0 * coef * (a - eps_v) / n)
        g_mu, _ = self.net.backward(cache_mu, 2.0 * coef * eps_v / n)
        return per.mean(), [p + q for p, q in zip(g_u, g_mu)], per


def jacobian_alpha_prime(model: MixedScoreModel, x, v, t):
    """Exact ``d alpha' / d(x, v)`` per row, shape ``(n, d, 2d)``."""
    feats = model.features(np.atleast_2d(x), np.atleast_2d(v), t)
    out, cache = model.net.forward(feats)
    n, d = out.shape
    jac = np.empty((n, d, 2 * d))
    for i in range(d):
        g = np.zeros_like(out)
        g[:, i] = 1.0
        _, gin = model.net.backward(cache, g)
        jac[:, i] = gin[:, : 2 * d]
    return jac


def jacobian_frobenius(model: MixedScoreModel, mix: GaussianMixture, p: CldParams, t_grid, n_mc, rng):
    """``E ||d alpha'/du||_F^2`` over diffused samples at each time."""
    from .mixtures import diffuse

    out = []
    for t in np.asarray(t_grid, dtype=float):
        x, v = diffuse(mix, p, t).sample(n_mc, rng)
        j = jacobian_alpha_prime(model, x, v, t)
        out.append(float(np.mean(np.sum(j * j, (1, 2)))))
    return np.array(out)


# --- optimisation ----------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=2e-4, b1=0.9, b2=0.999, eps=1e-8, warmup=0):
        self.lr, self.b1, self.b2, self.eps, self.warmup = lr, b1, b2, eps, warmup
        self.m = [np.zeros_like(q) for q in params]
        self.v = [np.zeros_like(q) for q in params]
        self.step_count = 0

    def current_lr(self):
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, self.step_count / self.warmup)

    def step(self, params, grads):
        self.step_count += 1
        lr = self.current_lr()
        c1 = 1 - self.b1**self.step_count
        c2 = 1 - self.b2**self.step_count
        for q, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            q -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Ema:
    def __init__(self, params, rate=0.9999):
        self.rate = rate
        self.shadow = [q.copy() for q in params]

    def update(self, params):
        for s, q in zip(self.shadow, params):
            s *= self.rate
            s += (1 - self.rate) * q


@dataclass
class TrainConfig:
    n_iters: int = 200_000
    batch: int = 512
    lr: float = 2e-4
    warmup: int = 10_000
    ema_rate: float = 0.9999
    weighting: str = "reweighted"
    kind: str = "hsm"
    t_cut: float = 1e-5
    log_every: int = 1000
    hidden: tuple = (128, 128, 128)
    mode: str = "mixed"


@dataclass
class TrainResult:
    losses: np.ndarray
    grad_norms: np.ndarray
    t_min: np.ndarray
    ema: list = field(default_factory=list)


class TrainingDiverged(FloatingPointError):
    pass


def train(model: MixedScoreModel, mix: GaussianMixture, cfg: TrainConfig, rng) -> TrainResult:
    """Fresh data every step, uniform t on ``[t_cut, T]``.

    Raises :class:`TrainingDiverged` as soon as the loss or a gradient is
    not finite.
    """
    p = model.p
    w = Weighting(cfg.weighting)
    opt = Adam(model.net.params, cfg.lr, warmup=cfg.warmup)
    ema = Ema(model.net.params, cfg.ema_rate)
    losses = np.empty(cfg.n_iters)
    gnorms = np.empty(cfg.n_iters)
    tmin = np.empty(cfg.n_iters)
    for it in range(cfg.n_iters):
        x0 = mix.sample(cfg.batch, rng)
        t = rng.uniform(cfg.t_cut, p.t_final, cfg.batch)
        loss, grads, _ = model.loss_and_grad(x0, t, w, rng, cfg.kind)
        gn = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
        if not np.isfinite(loss) or not np.isfinite(gn):
            tail = losses[max(0, it - 5) : it]
            raise TrainingDiverged(
                f"non-finite loss/grad at step {it} (loss={loss}, grad_norm={gn}, "
                f"recent losses={tail.tolist()})"
            )
        opt.step(model.net.params, grads)
        ema.update(model.net.params)
        losses[it], gnorms[it], tmin[it] = loss, gn, t.min()
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.info("step %d loss %.4f grad_norm %.3g", it + 1, loss, gn)
    return TrainResult(losses, gnorms, tmin, ema.shadow)


def with_params(model: MixedScoreModel, params) -> MixedScoreModel:
    net = model.net.copy()
    net.params = [q.copy() for q in params]
    return MixedScoreModel(net, model.p, model.mode)


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, model: MixedScoreModel, step: int = 0):
    header = json.dumps(
        {
            "widths": model.net.widths,
            "mode": model.mode,
            "params": model.p.to_dict(),
            "step": int(step),
        }
    ).encode()
    blob = model.net.get_flat().astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(blob)


def load_checkpoint(path):
    """Return ``(model, step)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError("not a CLDNET01 checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    flat = np.frombuffer(raw[12 + hlen :], dtype="<f8")
    net = Mlp(header["widths"], zero=True)
    net.set_flat(flat)
    pd = dict(header["params"])
    pd.pop("mass", None)
    return MixedScoreModel(net, CldParams(**pd), header["mode"]), header["step"]


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
