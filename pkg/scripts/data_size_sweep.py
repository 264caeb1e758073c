"""Correlation versus number of training subjects, with fixed validation and test subjects.

    python3 scripts/data_size_sweep.py --dataset starmen --fractions 0.1 0.25 0.5 1.0 --out sweep.csv
"""

import argparse
import logging
import csv

from pairrank.data import generate_starmen, generate_tumor, split_subjects
from pairrank.model import BackboneConfig, init_weights
from pairrank.training import TrainConfig, data_size_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", choices=("starmen", "tumor"), default="starmen")
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.1, 0.25, 0.5, 1.0])
    ap.add_argument("--subjects", type=int, default=None)
    ap.add_argument("--image-size", type=int, default=None)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--max-epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="data_size_sweep.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if args.dataset == "starmen":
        ds = generate_starmen(args.subjects or 200, 10, args.image_size or 64, seed=args.seed)
        cfg = TrainConfig(task="self_supervised", lr=args.lr, max_epochs=args.max_epochs, pairs_per_subject=10,
                          seed=args.seed)
    else:
        ds = generate_tumor(args.subjects or 100, args.image_size or 96, seed=args.seed)
        cfg = TrainConfig(task="supervised", lr=args.lr, max_epochs=args.max_epochs, seed=args.seed)
    ds = split_subjects(ds, seed=args.seed)
    mcfg = BackboneConfig.preset("lite", input_size=ds.samples[0].image.shape[-1])
    reports = data_size_sweep(ds, args.fractions, cfg, lambda: init_weights(mcfg, seed=args.seed))

    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["fraction", "pearson_r", "auc", "n_pairs"])
        for frac, rep in sorted(reports.items()):
            wr.writerow([frac, repr(rep.pearson_r), repr(rep.auc), rep.n_pairs])
            print(f"{frac:5.2f}  r={rep.pearson_r:.4f}  auc={rep.auc:.4f}")


if __name__ == "__main__":
    main()
