"""Command-line entry points: gen-data, train, evaluate, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure or
divergence of all seeds, 3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import checks
from . import data as D
from . import experiment as E


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="normlab",
                     description="Normalization study harness: datasets, training, "
                                 "evaluation and gradient checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a dataset to JSON-lines files")
    gen.add_argument("kind", choices=["sqoop", "fewshot"])
    gen.add_argument("--config", required=True, help="dataset config JSON path")
    gen.add_argument("--out", required=True, help="output directory")

    tr = sub.add_parser("train", help="train one experiment config over its seeds")
    tr.add_argument("--config", required=True, help="experiment config JSON path")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--seed", help="comma-separated seed list override")
    tr.add_argument("--norm-variant", dest="norm_variant", help="variant override")
    tr.add_argument("--groups", type=int, help="group-count override")
    tr.add_argument("--emit-plotdata", action="store_true",
                    help="also write accuracy curves to curves.csv")

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True, help="checkpoint directory")
    ev.add_argument("--split", default="test", choices=["train", "validation", "test"])
    ev.add_argument("--data", help="dataset directory override")
    ev.add_argument("--out", help="optional directory for the result row JSON")

    gc = sub.add_parser("gradcheck", help="run finite-difference gradient suites")
    gc.add_argument("--scope", default="all", choices=["ops", "norm", "models", "all"])
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--trials", type=int, default=20, help="random instances per op")
    return parser


def _load_json(path: str) -> dict:
    with open(path) as fh:
        loaded = json.load(fh)
    if not isinstance(loaded, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return loaded


def _cmd_gen_data(args) -> int:
    raw = _load_json(args.config)
    if args.kind == "sqoop":
        out = D.save_sqoop(D.generate_sqoop(D.SqoopConfig(**raw)), args.out)
    else:
        out = D.save_fewshot(D.gen_fewshot_universe(D.FewshotConfig(**raw)), args.out)
    manifest = json.loads((Path(out) / "manifest.json").read_text())
    print(f"wrote {args.kind} dataset to {out}")
    for name, info in manifest["splits"].items():
        print(f"  {name}: {json.dumps(info, sort_keys=True)}")
    return 0


def _cmd_train(args) -> int:
    raw = _load_json(args.config)
    if args.seed:
        try:
            raw["seeds"] = [int(s) for s in args.seed.split(",") if s]
        except ValueError as err:
            raise UsageError(f"--seed expects comma-separated integers: {err}")
    if args.norm_variant:
        raw["norm_variant"] = args.norm_variant
    if args.groups is not None:
        raw["groups"] = args.groups
    cfg = E.config_from_dict(raw)
    summary = E.train(cfg, args.out, emit_plotdata=args.emit_plotdata)
    mean = summary["test_accuracy_mean"]
    std = summary["test_accuracy_std"]
    if mean is not None:
        print(f"test accuracy {mean:.4f} +/- {std:.4f} over n={summary['n_used']} seeds")
    for failed in summary["failed_seeds"]:
        print(f"seed {failed['seed']} failed: {failed['message']}", file=sys.stderr)
    if summary["n_used"] == 0:
        print("all seeds diverged", file=sys.stderr)
        return 2
    return 0


def _cmd_evaluate(args) -> int:
    row = E.evaluate_checkpoint(args.checkpoint, args.split, data_dir=args.data)
    print(json.dumps(row, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"evaluate_{args.split}.json", "w") as fh:
            json.dump(row, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _cmd_gradcheck(args) -> int:
    results = checks.run_checks(scope=args.scope, seed=args.seed, op_trials=args.trials)
    print(checks.format_report(results))
    return 0 if all(r.passed for r in results) else 3


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        return _cmd_gradcheck(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (E.ConfigError, D.DataConfigError, E.CheckpointError,
            FileNotFoundError, json.JSONDecodeError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
