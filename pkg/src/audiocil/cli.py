import argparse
import json
import logging
import sys

from .audio_data import DATASETS
from .config import ConfigError, list_models, parse_config
from .learners import UNIMPLEMENTED
from .runner import emit_plot, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="audiocil", description="Audio class-incremental learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a JSON config")
    run.add_argument("--config", required=True, help="path to the JSON config")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--output", help="override the output directory")
    run.add_argument("--plot", action="store_true", help="also write curve.svg")

    sub.add_parser("list-models", help="list learner registry keys")
    sub.add_parser("list-datasets", help="list dataset registry keys")

    plot = sub.add_parser("plot", help="plot accuracy curves from results files")
    plot.add_argument("--inputs", nargs="+", required=True)
    plot.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "list-models":
        for name in list_models():
            print(name)
        for name in UNIMPLEMENTED:
            print(f"{name} (not implemented)")
        return 0
    if args.command == "list-datasets":
        for name in sorted(DATASETS):
            print(name)
        return 0
    if args.command == "plot":
        bundles = [json.loads(open(p).read()) for p in args.inputs]
        print(emit_plot(bundles, args.out))
        return 0

    with open(args.config) as fh:
        doc = json.load(fh)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.output is not None:
        doc["output_dir"] = args.output
    try:
        config = parse_config(doc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    bundle = run_experiment(config, plot=args.plot)
    print(json.dumps({"model_name": config.model_name, "curve": bundle["curve"],
                      "average_accuracy": bundle["average_accuracy"]}))
    return 0
