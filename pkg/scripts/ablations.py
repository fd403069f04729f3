"""Run the three ablation sweeps (direction, rho, RTL head depth) on one toy corpus.

    python3 scripts/ablations.py --out runs/ablate [--steps 2000]

Each sweep writes OUT/<sweep>/ablate_<sweep>.csv through the ``dap ablate`` command.
"""

import argparse
import sys
from pathlib import Path

from dap.cli import main as dap


def run() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablate")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    corpus = out / "corpus.tsv"
    if not corpus.exists():
        code = dap(["gen-data", "--out", str(corpus), "--seed", str(args.seed)])
        if code:
            return code
    worst = 0
    for sweep in ("direction", "rho", "klayers"):
        code = dap(["ablate", "--corpus", str(corpus), "--sweep", sweep, "--steps", str(args.steps),
                    "--seed", str(args.seed), "--out", str(out), "--name", sweep, "--force", "-v"])
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(run())
