"""Command-line front end.

    hjb-lab <subcommand> [--config file.json] [--variant original|hat|approx:<n>]
            [--horizon T] [--out DIR] [--workers K] [--seed S]

Prints a JSON summary ``{suite, pass, witnesses, seconds}`` and exits with
0 on pass, 1 on suite failure and 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from pydantic import ValidationError

from .suites import SUITES, ConfigError, load_config

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--variant", help="original, hat or approx:<n>")
    common.add_argument("--horizon", type=float, help="final time T")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="parallel workers")
    common.add_argument("--seed", type=int, help="seed for sampling plans")

    parser = argparse.ArgumentParser(prog="hjb-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUITES:
        p = sub.add_parser(name, parents=[common])
        if name == "export-field":
            p.add_argument("--field", help="dp, U, V or Vn:<n>")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PASS if exc.code == 0 else EXIT_USAGE
    overrides = {k: getattr(args, k, None) for k in ("variant", "horizon", "out", "workers", "seed", "field")}
    try:
        config = load_config(args.config, overrides)
        result = SUITES[args.command](config)
    except (ValidationError, ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(result.to_dict(), indent=2, default=float))
    return EXIT_PASS if result.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
