"""``cld-lab`` command line entry point."""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .experiments import RUNNERS, ExperimentResult
from .sampleio import samples_to_bytes, table_to_csv, table_to_json

S = argparse.SUPPRESS


@dataclass
class RunManifest:
    experiment: str
    config: dict
    version: str
    wall_time_s: float
    metrics: dict = field(default_factory=dict)
    rng_streams: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    threads: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def version_string() -> str:
    try:
        from importlib.metadata import version

        base = version("artifact")
    except Exception:
        base = "0+unknown"
    try:
        here = Path(__file__).resolve().parent
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}+g{desc.stdout.strip()}"
    except Exception:
        pass
    return base


def _csv_list(kind):
    def parse(s):
        return [kind(x) for x in s.split(",") if x.strip()]

    return parse


def _common(sp):
    sp.add_argument("--config", default=S, help="JSON file with option values; flags override it")
    sp.add_argument("--seed", type=int, default=S)
    sp.add_argument("--out", default=S, help="output path (stdout when omitted)")
    sp.add_argument("--manifest", default=S, help="manifest path (default: <out>.manifest.json)")
    sp.add_argument("--format", choices=["csv", "json", "bin"], default=S)
    sp.add_argument("--beta", type=float, default=S)
    sp.add_argument("--gamma-fric", dest="gamma_fric", type=float, default=S)
    sp.add_argument("--gamma0", type=float, default=S)
    sp.add_argument("--eps", type=float, default=S, help="terminal cutoff")


def _train_flags(sp):
    sp.add_argument("--iters", type=int, default=S)
    sp.add_argument("--batch", type=int, default=S)
    sp.add_argument("--lr", type=float, default=S)
    sp.add_argument("--warmup", type=int, default=S)
    sp.add_argument("--ema", type=float, default=S)
    sp.add_argument("--weighting", choices=["ml", "reweighted"], default=S)
    sp.add_argument("--objective", choices=["hsm", "dsm"], default=S)
    sp.add_argument("--dataset", choices=["nine_gaussians", "normal"], default=S)


def build_parser():
    ap = argparse.ArgumentParser(prog="cld-lab", description="Critically-damped Langevin diffusion toy experiments")
    sub = ap.add_subparsers(dest="experiment", required=True)

    sp = sub.add_parser("analytical-table", help="sample NLL with exact mixture scores")
    _common(sp)
    sp.add_argument("--n-samples", dest="n_samples", type=int, default=S)
    sp.add_argument("--schedule", choices=["uniform", "quadratic"], default=S)
    sp.add_argument("--steps", type=_csv_list(int), default=S)

    sp = sub.add_parser("xi", help="score distance to the equilibrium score")
    _common(sp)
    sp.add_argument("--n-mc", dest="n_mc", type=int, default=S)
    sp.add_argument("--n-grid", dest="n_grid", type=int, default=S)

    sp = sub.add_parser("jacobian", help="Jacobian norm of trained mixed vs raw nets")
    _common(sp)
    _train_flags(sp)
    sp.add_argument("--n-mc", dest="n_mc", type=int, default=S)
    sp.add_argument("--n-grid", dest="n_grid", type=int, default=S)

    sp = sub.add_parser("damping", help="convergence for several friction values")
    _common(sp)
    sp.add_argument("--factors", type=_csv_list(float), default=S, help="Gamma^2/(4M) values")
    sp.add_argument("--n-paths", dest="n_paths", type=int, default=S)

    sp = sub.add_parser("gradvar", help="HSM vs DSM gradient variance")
    _common(sp)
    sp.add_argument("--n-mc", dest="n_mc", type=int, default=S)
    sp.add_argument("--t-grid", dest="t_grid", type=_csv_list(float), default=S)
    sp.add_argument("--gammas", type=_csv_list(float), default=S)

    sp = sub.add_parser("train", help="train the toy score network")
    _common(sp)
    _train_flags(sp)
    sp.add_argument("--mode", choices=["mixed", "raw"], default=S)
    sp.add_argument("--checkpoint", default=S, help="where to write the EMA checkpoint")

    sp = sub.add_parser("sample", help="draw samples")
    _common(sp)
    sp.add_argument("--sampler", choices=["sscs", "em", "ode"], default=S)
    sp.add_argument("--n", type=int, default=S)
    sp.add_argument("--steps", type=int, default=S)
    sp.add_argument("--schedule", choices=["uniform", "quadratic"], default=S)
    sp.add_argument("--checkpoint", default=S, help="trained model (analytic score when omitted)")
    sp.add_argument("--dataset", choices=["nine_gaussians", "normal"], default=S)
    sp.add_argument("--denoise-velocity", dest="denoise_velocity", action="store_true", default=S)

    sp = sub.add_parser("likelihood", help="probability-flow NLL bound")
    _common(sp)
    sp.add_argument("--n-data", dest="n_data", type=int, default=S)
    sp.add_argument("--n-v", dest="n_v", type=int, default=S)
    sp.add_argument("--probes", type=int, default=S)
    sp.add_argument("--checkpoint", default=S)
    sp.add_argument("--dataset", choices=["nine_gaussians", "normal"], default=S)

    sp = sub.add_parser("isweights", help="importance weights over t")
    _common(sp)
    sp.add_argument("--conditioning", choices=["dsm", "hsm"], default=S)
    sp.add_argument("--form", choices=["exact", "assumed"], default=S)
    sp.add_argument("--n-grid", dest="n_grid", type=int, default=S)
    return ap


DEFAULTS = {"seed": 0, "format": "csv"}


def resolve_config(args) -> dict:
    given = vars(args).copy()
    exp = given.pop("experiment")
    file_cfg = {}
    if "config" in given:
        with open(given.pop("config")) as f:
            file_cfg = json.load(f)
        if not isinstance(file_cfg, dict):
            raise ValueError("config file must hold a JSON object")
    cfg = {**DEFAULTS, **file_cfg, **given}
    cfg["experiment"] = exp
    return cfg


def _thread_limit():
    raw = os.environ.get("CLD_LAB_THREADS")
    if not raw:
        return None, nullcontext()
    n = int(raw)
    if n < 1:
        raise ValueError("CLD_LAB_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return n, threadpool_limits(limits=n)


def render(res: ExperimentResult, fmt: str, exp: str) -> bytes:
    if fmt == "csv":
        return table_to_csv(res.columns, res.rows).encode()
    if fmt == "json":
        return table_to_json(res.columns, res.rows, experiment=exp, metrics=res.metrics).encode()
    if fmt == "bin":
        if "x" not in res.artifacts:
            raise ValueError("binary output is only available for 'sample'")
        return samples_to_bytes(res.artifacts["x"])
    raise ValueError(f"unknown format {fmt!r}")


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (OSError, ValueError) as e:
        print(f"cld-lab: bad config: {e}", file=sys.stderr)
        return 2
    exp = cfg["experiment"]
    t0 = time.perf_counter()
    failures = []
    res = None
    try:
        threads, limiter = _thread_limit()
        with limiter:
            res = RUNNERS[exp](cfg)
        payload = render(res, cfg["format"], exp)
    except Exception as e:  # reported in the manifest and via the exit code
        failures.append(f"{type(e).__name__}: {e}")
        threads, payload = None, b""
    wall = time.perf_counter() - t0

    out = cfg.get("out")
    if payload:
        if out:
            Path(out).write_bytes(payload)
        else:
            sys.stdout.buffer.write(payload)
            sys.stdout.flush()
    if res is not None and exp == "train" and cfg.get("checkpoint"):
        from .scorenet import save_checkpoint

        save_checkpoint(cfg["checkpoint"], res.artifacts["model"], res.artifacts["step"])

    manifest = RunManifest(
        experiment=exp,
        config={k: v for k, v in cfg.items() if k not in ("out", "manifest")},
        version=version_string(),
        wall_time_s=wall,
        metrics=res.metrics if res is not None else {},
        rng_streams=[f"seed={cfg['seed']}/{s}" for s in (res.streams if res is not None else [])],
        failures=failures + (res.failures if res is not None else []),
        threads=threads,
    )
    mpath = cfg.get("manifest") or (f"{out}.manifest.json" if out else None)
    text = manifest.to_json()
    if mpath:
        Path(mpath).write_text(text + "\n")
    else:
        print(text, file=sys.stderr)
    if manifest.failures:
        for f in manifest.failures:
            print(f"cld-lab: {f}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
