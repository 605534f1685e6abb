"""Distance of the diffused score from the equilibrium score, CLD vs VPSDE."""
import sys

from _common import run

if __name__ == "__main__":
    sys.exit(run("xi", "xi.csv", "--n-mc", "100000", "--n-grid", "50"))
