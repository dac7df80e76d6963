"""Integration error of a trained decoder as the number of RQMC / MC points grows.

    python scripts/integration_error.py --model runs/demo/decoder_F.json --data test.csv --seed 0
"""

import argparse

import numpy as np

from contmix.circuits import CircuitStructure
from contmix.data import load_dataset
from contmix.decoder import load_decoder
from contmix.quadrature import estimate_integration_error, mc_rule
from contmix.trainer import mean_log_likelihood


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--seed", type=int, required=True)
    ap.add_argument("--shifts", type=int, default=8)
    ap.add_argument("--max-log2n", type=int, default=13)
    args = ap.parse_args()
    dec = load_decoder(args.model)
    structure = CircuitStructure.from_json(dec.structure_ref)
    data = load_dataset(args.data, expected_vars=structure.num_vars)
    print("log2N\trqmc_mean\trqmc_se\tmc_mean\tmc_se")
    for m in range(4, args.max_log2n + 1):
        n = 2 ** m
        rq_mean, rq_se = estimate_integration_error(dec, structure, data, n, dec.latent_dim,
                                                    num_shifts=args.shifts, seed=args.seed)
        mc = [mean_log_likelihood(dec, structure, mc_rule(n, dec.latent_dim, args.seed + r), data)
              for r in range(args.shifts)]
        print(f"{m}\t{rq_mean:.5f}\t{rq_se:.2e}\t{np.mean(mc):.5f}\t{np.std(mc, ddof=1) / np.sqrt(len(mc)):.2e}")


if __name__ == "__main__":
    main()
