"""Trace of the per-example gradient-norm covariance, HSM vs DSM, for two gamma values."""
import sys

from _common import run

if __name__ == "__main__":
    sys.exit(run("gradvar", "gradvar.csv", "--n-mc", "50000"))
