"""Command line entry point: ``bragg-nac <subcommand> [options]``.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
stage fails or its prerequisites are missing.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .data import generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--run-dir", metavar="PATH", default="run",
                        help="directory holding all artifacts of a run (default: ./run)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--workers", type=int, help="worker processes (overrides the config)")
    common.add_argument("--paper-scale", action="store_true",
                        help="use the full protocol budgets instead of desk-scale ones")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return common


def build_parser():
    parser = _Parser(prog="bragg-nac",
                     description="Architecture codesign pipeline for Bragg peak localization.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()
    helps = {
        "gen-data": "generate the synthetic pseudo-Voigt dataset",
        "global-search": "NSGA-II search over architectures (accuracy vs BOPs)",
        "local-hpo": "TPE search over training hyperparameters",
        "train": "train the selected model and the BraggNN baseline",
        "compress": "quantization-aware training with iterative pruning",
        "evaluate": "test-set distances and costs of every model",
        "report": "plot-data CSVs and the summary table",
        "run-all": "every stage in order, skipping those already up to date",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "gen-data":
            p.add_argument("--n", type=int, help="number of patches")
            p.add_argument("--noise-level", type=float, help="noise scale relative to sqrt(I)")
            p.add_argument("--out", metavar="PATH",
                           help="write a standalone dataset file instead of using a run dir")
    return parser


def _gen_data_standalone(args):
    overrides = {} if args.noise_level is None else {"noise_level": args.noise_level}
    ds = generate_dataset(args.n or pipeline.DESK_CONFIG["data"]["n_samples"],
                          seed=args.seed or 0, **overrides)
    ds.save(args.out)
    print(f"wrote {len(ds)} patches to {args.out}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "gen-data" and args.out:
            _gen_data_standalone(args)
            return EXIT_OK
        run = pipeline.Run.open(args.run_dir, args.config, args.paper_scale, args.seed,
                                args.workers)
        if args.command == "gen-data":
            data = run.config["data"]
            if args.n is not None:
                data["n_samples"] = args.n
            if args.noise_level is not None:
                data["noise_level"] = args.noise_level
            pipeline.validate_config(run.config)
            pipeline.write_json(run.path("config.json"), run.config)
        if args.command == "run-all":
            outcomes = pipeline.run_all(run)
        else:
            outcomes = [pipeline.COMMANDS[args.command](run)]
        for outcome in outcomes:
            status = "up-to-date" if outcome.skipped else "done"
            print(f"{outcome.stage}: {status} ({', '.join(outcome.outputs)})")
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # anything else escaping a stage is a stage failure
        logging.getLogger(__name__).debug("stage crashed", exc_info=True)
        print(f"stage failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
