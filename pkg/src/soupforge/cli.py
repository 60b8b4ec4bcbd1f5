"""``soupforge <stage> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 on success, 2 on a validation error (bad config, missing
inputs), 1 on any other failure.
"""

import argparse
import logging
import sys

from .config import Config, ConfigError
from .pipeline import STAGES


def parser():
    p = argparse.ArgumentParser(prog="soupforge",
                                description="Adversarial example soups at desk scale.")
    p.add_argument("stage", choices=sorted(STAGES))
    p.add_argument("--config", required=True, help="TOML config; 'default' for the packaged one")
    p.add_argument("--seed", type=int, default=None, help="run seed (overrides the config's)")
    p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None):
    try:
        args = parser().parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    try:
        cfg = Config.load(None if args.config == "default" else args.config)
        seed = cfg["seed"] if args.seed is None else args.seed
        out = args.out or cfg["output.dir"]
        STAGES[args.stage](cfg, seed, out)
    except ConfigError as exc:
        print(f"soupforge: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  runtime failures map to exit code 1
        print(f"soupforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
