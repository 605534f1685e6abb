"""Probability-flow NLL bound on nine_gaussians with the analytic score."""
import sys

from _common import run

if __name__ == "__main__":
    sys.exit(run("likelihood", "likelihood.csv", "--n-data", "200", "--n-v", "10"))
