"""Command-line driver: ``fdrnn {train,search,eval,field,spectrum,surrogate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import training
from .losses import LossKind
from .optim import spectral_radius


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _load_config(path, seed=None) -> training.RunConfig:
    d = _read_json(path) if path else {}
    if seed is not None:
        d["seed"] = seed
    return training.RunConfig.from_dict(d)


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    dataset = data_mod.load_dataset(args.data)
    record = training.train(config, dataset, args.out)
    print(json.dumps({"best_valid_nll": record.best_valid_nll, "best_epoch": record.best_epoch,
                      "failed": record.failed, "error": record.error}))
    return 1 if record.failed else 0


def cmd_search(args) -> int:
    space = training.SearchSpace.from_dict(_read_json(args.space)) if args.space else training.SearchSpace()
    base = _load_config(args.base) if args.base else training.RunConfig()
    dataset = data_mod.load_dataset(args.data)
    best, records = training.random_search(space, args.runs, dataset, args.seed, args.out,
                                           base=base, workers=args.workers)
    print(json.dumps({"best_index": best, "valid_nll": records[best].best_valid_nll,
                      "test_nll": records[best].test_nll}))
    return 0


def cmd_eval(args) -> int:
    dataset = data_mod.load_dataset(args.data)
    nll = training.evaluate(args.checkpoint, dataset, args.split)
    print(json.dumps({"split": args.split, "nll": nll}))
    return 0


def cmd_field(args) -> int:
    mean_grid = np.linspace(args.mean_min, args.mean_max, args.mean_n)
    var_grid = np.linspace(args.var_min, args.var_max, args.var_n)
    table = training.export_field(args.loss, args.target, mean_grid, var_grid, args.out)
    print(json.dumps({"rows": len(table), "out": str(args.out)}))
    return 0


def cmd_spectrum(args) -> int:
    params, _, _ = training.load_checkpoint(args.checkpoint)
    W = params.W_rec.astype(np.float64)
    print(json.dumps({"spectral_radius": spectral_radius(W),
                      "spectral_radius_abs": spectral_radius(np.abs(W)),
                      "spectral_radius_squared": spectral_radius(W * W)}))
    return 0


def cmd_surrogate(args) -> int:
    ds = data_mod.synthetic_chorales(args.seed)
    data_mod.save_dataset(ds, args.out)
    print(json.dumps(ds.sizes()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdrnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", help="RunConfig JSON (defaults for missing fields)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="random hyperparameter search")
    p.add_argument("--space", help="SearchSpace JSON (default: full grid)")
    p.add_argument("--base", help="RunConfig JSON for fields not searched over")
    p.add_argument("--runs", type=int, default=32)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="NLL of a checkpoint on unsplit sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=data_mod.SPLITS, default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("field", help="export a single-unit loss field as CSV")
    p.add_argument("--loss", choices=[k.value for k in LossKind], required=True)
    p.add_argument("--target", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.add_argument("--mean-min", type=float, default=float(training.DEFAULT_MEAN_GRID[0]))
    p.add_argument("--mean-max", type=float, default=float(training.DEFAULT_MEAN_GRID[-1]))
    p.add_argument("--mean-n", type=int, default=len(training.DEFAULT_MEAN_GRID))
    p.add_argument("--var-min", type=float, default=float(training.DEFAULT_VAR_GRID[0]))
    p.add_argument("--var-max", type=float, default=float(training.DEFAULT_VAR_GRID[-1]))
    p.add_argument("--var-n", type=int, default=len(training.DEFAULT_VAR_GRID))
    p.set_defaults(func=cmd_field)

    p = sub.add_parser("spectrum", help="spectral radius of a checkpoint's recurrent matrix")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("surrogate", help="write the synthetic chorale dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_surrogate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"fdrnn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
