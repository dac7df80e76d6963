"""Desk-scale benchmark runs on DEBD datasets (needs the data under $CONTMIX_DEBD_DIR).

For each dataset: CM(F) and CM(CLT) trained with integration, an equal-weight
plain mixture trained the same way, and latent optimisation at N=2^6.

    python scripts/desk_benchmarks.py --datasets nltcs plants jester --seed 0
"""

import argparse
import csv
import time
from pathlib import Path

from contmix.circuits import CircuitStructure, mixture_log_density
from contmix.clt import learn_structure
from contmix.data import DEBD_NAMES, load_debd
from contmix.latopt import LatOptConfig, latent_optimise
from contmix.quadrature import rqmc_rule
from contmix.trainer import TrainConfig, mean_log_likelihood, train_cm, train_plain_mixture


def run_dataset(name, args):
    splits = load_debd(name)
    D = splits["train"].num_vars
    cfg = TrainConfig(n_points=args.n_points, max_epochs=args.epochs, seed=args.seed)
    eval_rule = rqmc_rule(args.n_points, cfg.latent_dim, 42)
    rows = []
    for tag, structure in (("CM(F)", CircuitStructure.factorised(D)), ("CM(CLT)", learn_structure(splits["train"]))):
        t0 = time.perf_counter()
        dec, report = train_cm(cfg, splits["train"], splits["valid"], structure)
        rows.append((tag, args.n_points, mean_log_likelihood(dec, structure, eval_rule, splits["test"]),
                     report.best_epoch, time.perf_counter() - t0))
        small = rqmc_rule(2 ** 6, cfg.latent_dim, 42)
        lo = latent_optimise(dec, structure, small, splits["train"], splits["valid"],
                             LatOptConfig(n_points=2 ** 6, seed=args.seed))
        rows.append((tag, 2 ** 6, mean_log_likelihood(dec, structure, small, splits["test"]), "", ""))
        rows.append((tag + "+LO", 2 ** 6, mean_log_likelihood(dec, structure, lo, splits["test"]),
                     lo.provenance["best_epoch"], ""))
    t0 = time.perf_counter()
    dm = train_plain_mixture(splits["train"], args.n_points, "equal", cfg, valid=splits["valid"])
    rows.append(("DM(F) equal", args.n_points, float(mixture_log_density(dm, splits["test"].rows).mean()),
                 dm.metadata["best_epoch"], time.perf_counter() - t0))
    return [(name, *r) for r in rows]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--datasets", nargs="+", default=["nltcs", "plants", "jester"], choices=DEBD_NAMES)
    ap.add_argument("--seed", type=int, required=True)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--n-points", type=int, default=2 ** 10)
    ap.add_argument("--out", default="runs/desk_benchmarks.csv")
    args = ap.parse_args()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "model", "n_points", "test_ll", "best_epoch", "seconds"])
        for name in args.datasets:
            for row in run_dataset(name, args):
                w.writerow(row)
                fh.flush()
                print(*row, sep="\t")


if __name__ == "__main__":
    main()
