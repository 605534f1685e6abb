"""Importance-sampling weight curves over t under the Gaussian-data model."""
import sys

from _common import run

if __name__ == "__main__":
    code = run("isweights", "isweights_exact.csv", "--form", "exact")
    code |= run("isweights", "isweights_assumed.csv", "--form", "assumed")
    sys.exit(code)
