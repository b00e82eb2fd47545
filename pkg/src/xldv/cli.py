"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage/config error, 2 data error (missing or
malformed artifacts), 3 numeric failure. Every failure prints a single
machine-parseable line to stderr: ``xldv: error: <category>: <message>``.
"""

import argparse
import logging
import sys

from . import config as config_mod
from . import pipeline
from .errors import ConfigError, DataError, InvalidArgumentError, NumericError, XldvError

log = logging.getLogger("xldv")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="xldv", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands = pipeline.STAGE_NAMES + ["all", "validate-config"]
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--run-dir", default=None,
                       help="run directory (default: $XLDV_RUN_DIR or runs/<hash>)")
        p.add_argument("--seed", type=int, default=None,
                       help="override experiment.seed")
        p.add_argument("--deterministic", action="store_true",
                       help="float64 training mode")
        p.add_argument("--force", action="store_true",
                       help="re-run stages even when up to date")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def _load(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.set("experiment.seed", args.seed)
    if args.deterministic:
        cfg.set("experiment.deterministic", "true")
    return cfg.validate()


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        logging.basicConfig(
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(asctime)s %(name)s: %(message)s", datefmt="%H:%M:%S",
        )
        cfg = _load(args)
        if args.command == "validate-config":
            sys.stdout.write(cfg.report())
            return 0
        ctx = pipeline.make_context(cfg, args.run_dir)
        if args.command == "all":
            ran = pipeline.run_all(ctx, force=args.force)
            log.info("stages run: %s", ", ".join(ran) if ran else "none (all current)")
        else:
            pipeline.run_stage(ctx, args.command, force=args.force)
        return 0
    except ConfigError as exc:
        print(f"xldv: error: config: {exc}", file=sys.stderr)
        return 1
    except (DataError, InvalidArgumentError) as exc:
        print(f"xldv: error: data: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"xldv: error: numeric: {exc}", file=sys.stderr)
        return 3
    except XldvError as exc:
        print(f"xldv: error: internal: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
