import sys
from pathlib import Path

from cldlab.cli import main

OUT = Path(__file__).resolve().parent.parent / "results"


def run(experiment, name, *flags):
    OUT.mkdir(exist_ok=True)
    path = OUT / name
    code = main([experiment, "--out", str(path), *flags, *sys.argv[1:]])
    print(f"{experiment}: exit {code}, wrote {path}")
    return code
