"""End-to-end run on generated data: train, compile, optimise points, compare with baselines.

    python scripts/synthetic_demo.py --out-dir runs/demo --seed 0
"""

import argparse
import json
from pathlib import Path

from contmix.circuits import CircuitStructure, component_log_density, mixture_log_density, save_pc
from contmix.clt import fit_clt_closed_form, learn_structure
from contmix.compilepc import compile_pc
from contmix.decoder import save_decoder
from contmix.latopt import LatOptConfig, latent_optimise
from contmix.quadrature import rqmc_rule
from contmix.synthetic import continuous_mixture_pc, split_samples
from contmix.trainer import TrainConfig, evaluate, train_cm, train_plain_mixture, write_ll_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/demo")
    ap.add_argument("--seed", type=int, required=True)
    ap.add_argument("--num-vars", type=int, default=16)
    ap.add_argument("--train-size", type=int, default=5000)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--n-points", type=int, default=2 ** 10)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    gt = continuous_mixture_pc(args.num_vars, 4, seed=args.seed)
    sp = split_samples(gt, (args.train_size, 1000, 2000), seed=args.seed)
    test = sp["test"].rows
    table = {"ground truth": float(mixture_log_density(gt, test).mean())}

    clt = learn_structure(sp["train"])
    table["CLT (closed form)"] = float(component_log_density(clt, fit_clt_closed_form(sp["train"], clt),
                                                              test).mean())

    cfg = TrainConfig(n_points=args.n_points, max_epochs=args.epochs, seed=args.seed)
    for name, structure in (("F", CircuitStructure.factorised(args.num_vars)), ("CLT", clt)):
        dec, report = train_cm(cfg, sp["train"], sp["valid"], structure)
        save_decoder(dec, out / f"decoder_{name}.json")
        report.write_csv(out / f"report_{name}.csv")
        rows = evaluate(dec, test, n_points=(2 ** 6, 2 ** 10, 2 ** 13), structure=structure)
        write_ll_csv(rows, out / f"eval_{name}.csv")
        for r in rows:
            table[f"CM({name}) N={r['n_points']}"] = r["mean_ll"]
        rule = rqmc_rule(2 ** 6, 4, 42)
        lo_rule = latent_optimise(dec, structure, rule, sp["train"], sp["valid"], LatOptConfig(n_points=2 ** 6))
        pc = compile_pc(dec, structure, lo_rule)
        save_pc(pc, out / f"pc_{name}_latopt64.json")
        table[f"CM({name}) N=64 + LO"] = float(mixture_log_density(pc, test).mean())

    for mode in ("equal", "learnable"):
        pc = train_plain_mixture(sp["train"], 2 ** 8, mode, cfg, valid=sp["valid"])
        table[f"plain mixture ({mode}, 256)"] = float(mixture_log_density(pc, test).mean())
    pc = train_plain_mixture(sp["train"], 2 ** 8, "em", cfg)
    table["plain mixture (em, 256)"] = float(mixture_log_density(pc, test).mean())

    width = max(map(len, table))
    for k, v in table.items():
        print(f"{k:<{width}}  {v:9.4f}")
    (out / "summary.json").write_text(json.dumps({"seed": args.seed, "test_ll": table}, indent=1) + "\n")


if __name__ == "__main__":
    main()
