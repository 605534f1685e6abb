"""Time to equilibrium and oscillation for under-, critically and over-damped Langevin."""
import sys

from _common import run

if __name__ == "__main__":
    sys.exit(run("damping", "damping.csv"))
