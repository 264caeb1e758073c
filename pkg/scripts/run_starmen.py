"""Starmen-lite experiment: self-supervised ordering, frozen-backbone and untrained ablations.

    python3 scripts/run_starmen.py --out runs/ [--seed 0] [--quick]
"""

import argparse
import logging
import json
from pathlib import Path

from pairrank.cli import run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true", help="tiny sizes, one epoch")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    results = run_scenario("starmen", Path(args.out), seed=args.seed, quick=args.quick)
    for name, res in results.items():
        print(f"{name:<10s} r={res['pearson_r']:.4f}  auc={res['auc']:.4f}  {res['seconds']:.0f}s")
    (Path(args.out) / "starmen" / "summary.json").write_text(json.dumps(results, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
