"""Jacobian norm of the learned residual, mixed vs raw parameterisation (trains two nets)."""
import sys

from _common import run

if __name__ == "__main__":
    sys.exit(run("jacobian", "jacobian.csv", "--iters", "20000", "--lr", "1e-3", "--warmup", "1000", "--ema", "0.999"))
