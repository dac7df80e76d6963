"""Command-line entry point: ``contmix <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or model error.  Every run
writes a JSON manifest with its arguments, seeds and library versions, from
which the run can be repeated (``argv`` field).
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .circuits import CircuitError, CircuitStructure, CompiledPC, load_pc, mpe_complete, sample, save_pc
from .clt import DEFAULT_ALPHA, fit_clt_closed_form, learn_structure
from .compilepc import compile_pc
from .data import DataError, apply_random_block_mask, load_dataset, load_mask, save_dataset
from .decoder import DecoderError, load_decoder, save_decoder
from .latopt import LatOptConfig, latent_optimise
from .quadrature import RuleError, estimate_integration_error, make_rule, save_rule_csv
from .trainer import LL_COLUMNS, TrainConfig, evaluate, train_cm, train_plain_mixture, write_ll_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _require_seed(args, why):
    if args.seed is None:
        raise UsageError(f"--seed is required for {why}")
    return args.seed


def _load_structure(args, num_vars):
    if args.structure == "factorised":
        return CircuitStructure.factorised(num_vars)
    if not args.clt_file:
        raise UsageError("--structure clt needs --clt-file (create one with `contmix clt-learn`)")
    try:
        obj = json.loads(Path(args.clt_file).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read CLT structure {args.clt_file}: {exc}") from exc
    structure = CircuitStructure.from_json(obj.get("structure", obj))
    if structure.num_vars != num_vars:
        raise DataError(f"CLT structure has {structure.num_vars} variables, data has {num_vars}")
    return structure


def _decoder_structure(dec):
    if dec.structure_ref is None:
        raise DecoderError("decoder file has no structure reference")
    return CircuitStructure.from_json(dec.structure_ref)


def _write_manifest(path, args, argv, outputs, extra=None):
    seeds = {k: v for k, v in vars(args).items() if "seed" in k and v is not None}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "seeds": seeds,
        "versions": {"contmix": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": [str(p) for p in outputs],
    }
    if extra:
        manifest.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=1, default=str) + "\n", encoding="utf-8")


def _manifest_path(args, primary):
    if args.manifest:
        return Path(args.manifest)
    if primary is None:
        return Path(f"contmix-{args.command}.manifest.json")
    return Path(str(primary) + ".manifest.json")


def _emit_ll_rows(rows, out):
    if out:
        write_ll_csv(rows, out)
        return
    w = csv.DictWriter(sys.stdout, fieldnames=LL_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _train_config(args):
    return TrainConfig(
        n_points=args.n_points, latent_dim=args.latent_dim, batch_size=args.batch_size,
        max_epochs=args.max_epochs, patience=args.patience, top_k=args.top_k, seed=args.seed,
        method=args.method, lr=args.lr, batch_norm=not args.no_batch_norm, eval_seed=args.eval_seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_clt_learn(args, argv):
    data = load_dataset(args.data)
    structure = learn_structure(data, alpha=args.alpha, root=args.root)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"structure": structure.to_json(), "alpha": args.alpha, "root": args.root},
                              indent=1) + "\n", encoding="utf-8")
    outputs = [out]
    if args.pc_out:
        params = fit_clt_closed_form(data, structure, alpha=args.alpha)
        save_pc(CompiledPC(structure, np.ones(1), params[None], {"method": "clt-closed-form"}), args.pc_out)
        outputs.append(args.pc_out)
    _write_manifest(_manifest_path(args, out), args, argv, outputs)


def _run_training(args, argv, train_masks=None, valid_masks=None, extra=None):
    seed = _require_seed(args, "training")
    train = load_dataset(args.train)
    valid = load_dataset(args.valid, expected_vars=train.num_vars, split_tag="valid")
    test = load_dataset(args.test, expected_vars=train.num_vars, split_tag="test") if args.test else None
    structure = _load_structure(args, train.num_vars)
    try:
        config = _train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    test_points = tuple(args.test_n_points) if test is not None else ()
    dec, report = train_cm(config, train, valid, structure, train_masks=train_masks, valid_masks=valid_masks,
                           test=test, test_points=test_points)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_decoder(dec, out / "decoder.json")
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    _write_manifest(args.manifest or out / "manifest.json", args, argv,
                    [out / "decoder.json", out / "report.csv", out / "report.json"],
                    {"config": config.to_json(), "seed": seed, **(extra or {})})


def cmd_train(args, argv):
    _run_training(args, argv)


def cmd_mask_train(args, argv):
    _require_seed(args, "training")
    train = load_dataset(args.train)
    valid = load_dataset(args.valid, expected_vars=train.num_vars, split_tag="valid")
    if args.train_mask:
        train_masks = load_mask(args.train_mask, like=train)
        valid_masks = load_mask(args.valid_mask, like=valid) if args.valid_mask else None
        source = {"train_mask": args.train_mask, "valid_mask": args.valid_mask}
    elif args.block_shape:
        if not args.image_shape:
            raise UsageError("--block-shape needs --image-shape")
        train_masks = apply_random_block_mask(train, args.block_shape, args.image_shape, seed=args.seed)
        valid_masks = apply_random_block_mask(valid, args.block_shape, args.image_shape, seed=args.seed + 1)
        source = {"block_shape": args.block_shape, "image_shape": args.image_shape}
    else:
        raise UsageError("mask-train needs --train-mask or --block-shape/--image-shape")
    _run_training(args, argv, train_masks, valid_masks, {"masks": source})


def cmd_compile(args, argv):
    dec = load_decoder(args.model)
    structure = _decoder_structure(dec)
    seed = None if args.method == "gh" else _require_seed(args, f"{args.method} integration points")
    rule = make_rule(args.method, args.n_points, dec.latent_dim, seed)
    method = None
    if args.latopt:
        if not (args.train and args.valid):
            raise UsageError("--latopt needs --train and --valid")
        train = load_dataset(args.train, expected_vars=structure.num_vars)
        valid = load_dataset(args.valid, expected_vars=structure.num_vars, split_tag="valid")
        cfg = LatOptConfig(n_points=args.n_points, max_epochs=args.lo_epochs, patience=args.lo_patience,
                           lr=args.lo_lr, seed=seed or 0)
        rule = latent_optimise(dec, structure, rule, train, valid, cfg)
        method = "latopt"
    pc = compile_pc(dec, structure, rule, method=method)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_pc(pc, args.out)
    outputs = [args.out]
    if args.rule_out:
        save_rule_csv(rule, args.rule_out)
        outputs.append(args.rule_out)
    _write_manifest(_manifest_path(args, args.out), args, argv, outputs)


def cmd_eval(args, argv):
    if bool(args.pc) == bool(args.model):
        raise UsageError("eval needs exactly one of --pc or --model")
    if args.pc:
        pc = load_pc(args.pc)
        data = load_dataset(args.data, expected_vars=pc.num_vars, split_tag="test")
        rows = evaluate(pc, data)
    else:
        dec = load_decoder(args.model)
        structure = _decoder_structure(dec)
        data = load_dataset(args.data, expected_vars=structure.num_vars, split_tag="test")
        seed = 0 if args.method == "gh" else _require_seed(args, f"{args.method} evaluation")
        rows = evaluate(dec, data, n_points=args.n_points, method=args.method, seed=seed, structure=structure)
    _emit_ll_rows(rows, args.out)
    _write_manifest(_manifest_path(args, args.out), args, argv, [args.out or "<stdout>"], {"results": rows})


def cmd_baseline(args, argv):
    seed = _require_seed(args, "baseline initialisation")
    train = load_dataset(args.train)
    valid = load_dataset(args.valid, expected_vars=train.num_vars, split_tag="valid") if args.valid else None
    structure = _load_structure(args, train.num_vars)
    if args.mode != "em" and valid is None:
        raise UsageError(f"--mode {args.mode} needs --valid for early stopping")
    config = TrainConfig(max_epochs=args.max_epochs, patience=args.patience, batch_size=args.batch_size,
                         lr=args.lr, seed=seed)
    pc = train_plain_mixture(train, args.n_components, args.mode, config, structure=structure, valid=valid,
                             alpha=args.alpha)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_pc(pc, args.out)
    _write_manifest(_manifest_path(args, args.out), args, argv, [args.out], {"config": config.to_json()})


def cmd_err_est(args, argv):
    seed = _require_seed(args, "random shifts")
    dec = load_decoder(args.model)
    structure = _decoder_structure(dec)
    data = load_dataset(args.data, expected_vars=structure.num_vars, split_tag="test")
    rows = []
    for n in args.n_points:
        mean, se = estimate_integration_error(dec, structure, data, n, dec.latent_dim, num_shifts=args.shifts,
                                              seed=seed)
        rows.append({"n_points": n, "method": "rqmc", "seed": seed, "mean_ll": mean, "stderr": se})
    _emit_ll_rows(rows, args.out)
    _write_manifest(_manifest_path(args, args.out), args, argv, [args.out or "<stdout>"], {"results": rows})


def cmd_sample(args, argv):
    seed = _require_seed(args, "sampling")
    pc = load_pc(args.pc)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    data = sample(pc, args.count, seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, args.out)
    _write_manifest(_manifest_path(args, args.out), args, argv, [args.out])


def cmd_mpe(args, argv):
    pc = load_pc(args.pc)
    data = load_dataset(args.data, expected_vars=pc.num_vars, split_tag="test")
    mask = load_mask(args.mask, like=data)
    filled, comp = mpe_complete(pc, data.rows, mask.entries)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(type(data)(filled, split_tag="test"), args.out)
    outputs = [args.out]
    if args.components_out:
        Path(args.components_out).write_text("\n".join(map(str, comp)) + "\n", encoding="utf-8")
        outputs.append(args.components_out)
    _write_manifest(_manifest_path(args, args.out), args, argv, outputs)


# ---------------------------------------------------------------------------
# argument parsing


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _add_training_args(p):
    p.add_argument("--train", required=True, help="training CSV")
    p.add_argument("--valid", required=True, help="validation CSV")
    p.add_argument("--test", help="optional test CSV, evaluated with the best decoder")
    p.add_argument("--test-n-points", type=_positive_int, nargs="+", default=[2 ** 10])
    p.add_argument("--structure", choices=("factorised", "clt"), default="factorised")
    p.add_argument("--clt-file", help="structure JSON from clt-learn (needed for --structure clt)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-seed", type=int, default=42)
    p.add_argument("--n-points", type=_positive_int, default=2 ** 10)
    p.add_argument("--latent-dim", type=_positive_int, default=4)
    p.add_argument("--batch-size", type=_positive_int, default=128)
    p.add_argument("--max-epochs", type=int, default=300)
    p.add_argument("--patience", type=_positive_int, default=15)
    p.add_argument("--top-k", type=_positive_int)
    p.add_argument("--method", choices=("mc", "rqmc"), default="rqmc")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--no-batch-norm", action="store_true")


def build_parser():
    parser = _Parser(prog="contmix", description="Continuous mixtures of tractable circuits.")
    parser.add_argument("--version", action="version", version=f"contmix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        p.add_argument("--manifest", help="run-manifest path (default: next to the main output)")
        return p

    p = add("clt-learn", cmd_clt_learn, "learn a Chow-Liu tree structure")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--root", type=int, default=0)
    p.add_argument("--pc-out", help="also save the closed-form CLT as a one-component PC")

    _add_training_args(add("train", cmd_train, "train a continuous mixture"))

    p = add("mask-train", cmd_mask_train, "train on partially observed data")
    _add_training_args(p)
    p.add_argument("--train-mask")
    p.add_argument("--valid-mask")
    p.add_argument("--block-shape", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--image-shape", type=int, nargs=2, metavar=("H", "W"))

    p = add("compile", cmd_compile, "compile a trained decoder into a mixture PC")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("mc", "rqmc", "gh"), default="rqmc")
    p.add_argument("--n-points", type=_positive_int, default=2 ** 10)
    p.add_argument("--seed", type=int)
    p.add_argument("--latopt", action="store_true", help="optimise the points before compiling")
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--lo-epochs", type=int, default=50)
    p.add_argument("--lo-patience", type=_positive_int, default=15)
    p.add_argument("--lo-lr", type=float, default=1e-3)
    p.add_argument("--rule-out", help="also export the integration rule as CSV")

    p = add("eval", cmd_eval, "mean test log-likelihood")
    p.add_argument("--pc")
    p.add_argument("--model")
    p.add_argument("--data", required=True)
    p.add_argument("--n-points", type=_positive_int, nargs="+", default=[2 ** 10])
    p.add_argument("--method", choices=("mc", "rqmc", "gh"), default="rqmc")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV path (default: standard output)")

    p = add("baseline", cmd_baseline, "train a plain discrete mixture")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--mode", choices=("equal", "learnable", "em"), required=True)
    p.add_argument("--n-components", type=_positive_int, required=True)
    p.add_argument("--structure", choices=("factorised", "clt"), default="factorised")
    p.add_argument("--clt-file")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--max-epochs", type=int, default=300)
    p.add_argument("--patience", type=_positive_int, default=15)
    p.add_argument("--batch-size", type=_positive_int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("err-est", cmd_err_est, "integration error over random shifts")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-points", type=_positive_int, nargs="+", default=[2 ** 10])
    p.add_argument("--shifts", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("sample", cmd_sample, "draw samples from a compiled PC")
    p.add_argument("--pc", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("mpe", cmd_mpe, "complete missing entries with the most probable values")
    p.add_argument("--pc", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", required=True, help="CSV of 0/1 flags, 1 = observed")
    p.add_argument("--out", required=True)
    p.add_argument("--components-out")
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args, argv)
    except UsageError as exc:
        print(f"contmix: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CircuitError, DecoderError, RuleError, ValueError, OSError) as exc:
        print(f"contmix: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())
