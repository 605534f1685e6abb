"""NLL of samples drawn with exact mixture scores, CLD (EM, SSCS) and VPSDE (EM).

Extra CLI flags are passed through, e.g. ``--schedule quadratic``.
"""
import csv
import sys

from _common import OUT, run

if __name__ == "__main__":
    code = run("analytical-table", "analytical_table.csv", "--n-samples", "100000")
    with open(OUT / "analytical_table.csv") as f:
        for r in csv.DictReader(f):
            print(f"{r['sampler']:9s} n={r['n_steps']:>4s}  nll={float(r['nll']):8.3f}  ref={r['reference']}")
    sys.exit(code)
