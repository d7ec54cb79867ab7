"""Command-line entry point: ``mixemb <command> [--config PATH] [--seed N] [--out DIR] ...``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime or data errors; messages go to stderr.
"""
import argparse
import logging
import os
import sys

COMMANDS = ("gen-data", "train-teacher", "train-student", "train-tse", "eval-cluster", "eval-tse",
            "margin", "interp-embed", "interp-signal")

HELP = {
    "gen-data": "synthesize the speaker pools, mixtures and enrollment clips",
    "train-teacher": "train the single-speaker encoder with the angular-margin loss",
    "train-student": "distil the teacher into an n-head mixture encoder",
    "train-tse": "train the conditioned extractor on student candidates",
    "eval-cluster": "clustering report for teacher, student and baselines",
    "eval-tse": "SI-SDR / SI-SDRi of the extractor on held-out mixtures",
    "margin": "SI-SDRi bucketed by candidate cosine margin",
    "interp-embed": "extractor output while sliding the condition between two speakers",
    "interp-signal": "teacher clustering while blending clean and extracted signals",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="mixemb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", metavar="PATH", help="JSON config file (unknown keys are rejected)")
        p.add_argument("--seed", type=int, help="global seed (also used for the dataset)")
        p.add_argument("--out", metavar="DIR", help="output root (datasets, checkpoints, results)")
        p.add_argument("--threads", type=int, help="worker processes / BLAS threads")
        p.add_argument("--n-sp", type=int, dest="n_sp", help="speakers per mixture (1-3)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key with a JSON value, e.g. train.student_steps=500")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args):
    import json
    out = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    if args.seed is not None:
        out["seed"] = args.seed
        out["data.seed"] = args.seed
    if args.out is not None:
        out["out"] = args.out
    if args.threads is not None:
        out["threads"] = args.threads
    if args.n_sp is not None:
        out["data.n_sp"] = args.n_sp
    return out


def _limit_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(max(1, n)))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
    except UsageError as exc:
        print(f"mixemb: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is not None:
        _limit_threads(args.threads)

    # deferred so thread limits apply before numpy loads
    from ..errors import ConfigError, MixEmbError
    from .config import load_config
    from .experiments import COMMANDS as RUNNERS

    try:
        cfg = load_config(args.config, _overrides(args))
    except (ConfigError, UsageError) as exc:
        print(f"mixemb: config error: {exc}", file=sys.stderr)
        return 1
    try:
        RUNNERS[args.command](cfg)
    except ConfigError as exc:
        print(f"mixemb: config error: {exc}", file=sys.stderr)
        return 1
    except (MixEmbError, OSError, ValueError, FloatingPointError) as exc:
        print(f"mixemb: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
