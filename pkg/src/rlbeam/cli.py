"""Command line entry point.

    rlbeam learn-beam --config run.cfg --seed 3 --out runs/lb3
    rlbeam evaluate --config run.cfg --set evaluate.codebook=runs/lb3/codebook.json

Exit status: 0 on success, 2 for an invalid config, 1 for anything that goes
wrong while running.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import TASKS, ConfigError, load_config, parse_value

log = logging.getLogger("rlbeam")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlbeam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="task", required=True)
    for task in TASKS:
        s = sub.add_parser(task)
        s.add_argument("--config", help="key = value config file, or a run's metadata.json")
        s.add_argument("--seed", type=int, help="master seed override")
        s.add_argument("--out", help="output directory")
        s.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override a single config key (repeatable)",
        )
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    kv = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = parse_value(v)
    kv["task"] = args.task
    if args.seed is not None:
        kv["seed"] = args.seed
    if args.out is not None:
        kv["out"] = args.out
    return kv


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, _overrides(args))
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    # imported late so config errors do not pay for the numerics import
    from .experiment import run

    try:
        meta = run(cfg)
    except Exception as e:  # noqa: BLE001 - any failure maps to exit 1
        log.debug("run failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    summary = {k: meta[k] for k in ("egc_ratio", "best_gain", "objective") if k in meta}
    print(f"{cfg['task']} done -> {cfg['out']} {summary}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
